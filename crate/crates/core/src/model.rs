//! Full trainable head: relational graph module, node attention, and the
//! classifier, with batch forward/backward and checkpointing.
//!
//! The pieces compose per sample: a feature map runs through the graph head
//! to an L-dim embedding, the batch of embeddings hits one of the losses,
//! and each sample's cosine cotangent flows back through its own trace.
//! Gradients are accumulated strictly in ascending sample order so a batch
//! always reduces to bit-identical sums.
//!
//! [`check_gradients`] sweeps central finite differences over every
//! parameter entry of the assembled head and reports the worst relative
//! error per parameter group; an optional tamper hook corrupts one
//! analytic gradient so the harness can prove it catches bad adjoints.

use std::path::Path;

use thiserror::Error;

use crate::gradcheck::{central_diff, relative_error, FD_STEP};
use crate::losses::{
    arcface, c_softmax, cosface, cosine_logits, cosine_logits_vjp, normalized_softmax, softmax_ce,
    triplet_conditional, LossError, MarginConfig,
};
use crate::nau::NauParams;
use crate::rgm::{
    dropout_mask, rgm_backward, rgm_forward, EdgeActivation, FeatureMap, RgmError, RgmGrads,
    RgmParams, RgmTrace, RgmVariant,
};
use crate::rng::Rng;
use crate::synth::Sample;
use crate::tensor::{add, matmul, transpose, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Rgm(#[from] RgmError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] crate::io::IoError),
    #[error("head dims: {what} must be at least {min}")]
    InvalidDims { what: &'static str, min: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch holds no valid triplet (need two samples of one identity plus one other)")]
    NoTriplets,
    #[error("checkpoint is missing parameter tensor {name:?}")]
    MissingParam { name: &'static str },
    #[error("parameter {name:?} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown parameter group {name:?}")]
    UnknownParam { name: String },
}

/// Every size the head needs, bundled for construction and checkpointing.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Edge-scoring embedding width d.
    pub embed_dim: usize,
    /// Output embedding width L.
    pub out_dim: usize,
    /// Classifier class count M.
    pub classes: usize,
    /// Attention bottleneck divisor r.
    pub reduction: usize,
}

impl HeadDims {
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ones = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("embed_dim", self.embed_dim),
            ("reduction", self.reduction),
        ];
        for (what, v) in ones {
            if v < 1 {
                return Err(ModelError::InvalidDims { what, min: 1 });
            }
        }
        // an embedding needs a direction and a classifier needs a rival
        for (what, v) in [("out_dim", self.out_dim), ("classes", self.classes)] {
            if v < 2 {
                return Err(ModelError::InvalidDims { what, min: 2 });
            }
        }
        Ok(())
    }
}

/// The five classifier losses plus the ranking loss, as selected by
/// configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    /// Plain cross entropy on unnormalized biased logits.
    #[serde(rename = "softmax")]
    Softmax,
    /// Cross entropy on s-scaled cosines.
    #[serde(rename = "nsoftmax")]
    NSoftmax,
    /// Conditional-margin softmax.
    #[serde(rename = "csoftmax")]
    CSoftmax,
    /// Additive cosine margin.
    #[serde(rename = "cosface")]
    CosFace,
    /// Additive angular margin.
    #[serde(rename = "arcface")]
    ArcFace,
    /// Ratio-hinge triplet over in-batch pairs.
    #[serde(rename = "triplet-cond")]
    TripletCond,
}

impl LossKind {
    pub const ALL_CLASSIFIER: [LossKind; 5] = [
        LossKind::Softmax,
        LossKind::NSoftmax,
        LossKind::CSoftmax,
        LossKind::CosFace,
        LossKind::ArcFace,
    ];

    pub const ALL: [LossKind; 6] = [
        LossKind::Softmax,
        LossKind::NSoftmax,
        LossKind::CSoftmax,
        LossKind::CosFace,
        LossKind::ArcFace,
        LossKind::TripletCond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::NSoftmax => "nsoftmax",
            LossKind::CSoftmax => "csoftmax",
            LossKind::CosFace => "cosface",
            LossKind::ArcFace => "arcface",
            LossKind::TripletCond => "triplet-cond",
        }
    }

    pub fn parse_name(name: &str) -> Option<LossKind> {
        LossKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// A loss selection with all its knobs. `margin` drives the
/// conditional-margin softmax and carries the shared logit scale;
/// `additive_margin` is the cosine/angular additive m; `triplet_margin`
/// is the ratio-hinge threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub margin: MarginConfig,
    pub additive_margin: f64,
    pub triplet_margin: f64,
}

impl LossSpec {
    /// Kind-appropriate defaults: the published conditional-margin setting,
    /// the customary additive margins (0.35 cosine, 0.5 angular), and a
    /// ratio threshold of 0.8.
    pub fn new(kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            margin: MarginConfig::default(),
            additive_margin: match kind {
                LossKind::ArcFace => 0.5,
                _ => 0.35,
            },
            triplet_margin: 0.8,
        }
    }

    /// The logit scale shared by all angular variants.
    pub fn scale(&self) -> f64 {
        self.margin.s
    }
}

/// All trainable state of the head.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub dims: HeadDims,
    pub variant: RgmVariant,
    pub rgm: RgmParams,
    pub nau: NauParams,
    /// L x M classifier directions (columns are class anchors).
    pub w_cls: Tensor,
    /// Per-class bias, used only by the plain softmax loss.
    pub b_cls: Tensor,
}

/// One tensor per trainable parameter group, in the head's fixed order.
/// Doubles as the optimizer's velocity store since it is exactly
/// gradient-shaped.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w1: Tensor,
    pub we: Tensor,
    pub w2: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub nau_wa: Tensor,
    pub nau_wb: Tensor,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
}

/// Fixed parameter-group order used by the optimizer, the checkpoint
/// format, and the gradient checker.
pub const PARAM_NAMES: [&str; 9] = [
    "w1", "we", "w2", "w_fc", "b_fc", "nau_wa", "nau_wb", "w_cls", "b_cls",
];

impl HeadParams {
    /// Fresh head with fan-in-scaled random weights.
    pub fn init(
        dims: &HeadDims,
        variant: RgmVariant,
        activation: EdgeActivation,
        rng: &mut Rng,
    ) -> Result<HeadParams, ModelError> {
        dims.validate()?;
        let rgm = RgmParams::init(
            dims.channels,
            dims.embed_dim,
            dims.nodes(),
            dims.out_dim,
            activation,
            rng,
        );
        let nau = NauParams::init(dims.nodes(), dims.reduction, rng);
        let w_cls = Tensor::normal(
            vec![dims.out_dim, dims.classes],
            rng,
            1.0 / (dims.out_dim as f64).sqrt(),
        );
        let b_cls = Tensor::zeros(vec![dims.classes]);
        Ok(HeadParams {
            dims: dims.clone(),
            variant,
            rgm,
            nau,
            w_cls,
            b_cls,
        })
    }

    /// Parameter tensors in the fixed group order.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("w1", &self.rgm.w1),
            ("we", &self.rgm.we),
            ("w2", &self.rgm.w2),
            ("w_fc", &self.rgm.w_fc),
            ("b_fc", &self.rgm.b_fc),
            ("nau_wa", &self.nau.wa),
            ("nau_wb", &self.nau.wb),
            ("w_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("w1", &mut self.rgm.w1),
            ("we", &mut self.rgm.we),
            ("w2", &mut self.rgm.w2),
            ("w_fc", &mut self.rgm.w_fc),
            ("b_fc", &mut self.rgm.b_fc),
            ("nau_wa", &mut self.nau.wa),
            ("nau_wb", &mut self.nau.wb),
            ("w_cls", &mut self.w_cls),
            ("b_cls", &mut self.b_cls),
        ]
    }
}

fn acc(dst: &mut Tensor, src: &Tensor) -> Result<(), ShapeError> {
    *dst = add(dst, src)?;
    Ok(())
}

impl HeadGrads {
    pub fn zeros_like(params: &HeadParams) -> HeadGrads {
        let z = |t: &Tensor| Tensor::zeros(t.dims().to_vec());
        HeadGrads {
            w1: z(&params.rgm.w1),
            we: z(&params.rgm.we),
            w2: z(&params.rgm.w2),
            w_fc: z(&params.rgm.w_fc),
            b_fc: z(&params.rgm.b_fc),
            nau_wa: z(&params.nau.wa),
            nau_wb: z(&params.nau.wb),
            w_cls: z(&params.w_cls),
            b_cls: z(&params.b_cls),
        }
    }

    /// Gradient tensors in the same fixed group order as the parameters.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("w1", &self.w1),
            ("we", &self.we),
            ("w2", &self.w2),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("nau_wa", &self.nau_wa),
            ("nau_wb", &self.nau_wb),
            ("w_cls", &self.w_cls),
            ("b_cls", &self.b_cls),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 9] {
        [
            ("w1", &mut self.w1),
            ("we", &mut self.we),
            ("w2", &mut self.w2),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("nau_wa", &mut self.nau_wa),
            ("nau_wb", &mut self.nau_wb),
            ("w_cls", &mut self.w_cls),
            ("b_cls", &mut self.b_cls),
        ]
    }

    /// Adds one sample's head gradients into the running batch sum.
    fn absorb(&mut self, g: &RgmGrads) -> Result<(), ShapeError> {
        acc(&mut self.w1, &g.w1)?;
        acc(&mut self.we, &g.we)?;
        acc(&mut self.w2, &g.w2)?;
        acc(&mut self.w_fc, &g.w_fc)?;
        acc(&mut self.b_fc, &g.b_fc)?;
        acc(&mut self.nau_wa, &g.nau.wa)?;
        acc(&mut self.nau_wb, &g.nau.wb)?;
        Ok(())
    }
}

/// Per-sample dropout masks for one batch, drawn from one stream.
pub fn batch_dropout_masks(
    batch: usize,
    len: usize,
    p: f64,
    rng: &mut Rng,
) -> Result<Vec<Tensor>, ShapeError> {
    (0..batch).map(|_| dropout_mask(len, p, rng)).collect()
}

/// Embeds a batch of feature maps into B x L, keeping each sample's trace
/// for the backward pass. `masks` supplies one dropout mask per sample;
/// None runs the head deterministically (inference).
pub fn embed_batch(
    params: &HeadParams,
    maps: &[&FeatureMap],
    masks: Option<&[Tensor]>,
) -> Result<(Tensor, Vec<RgmTrace>), ModelError> {
    if maps.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if let Some(m) = masks {
        if m.len() != maps.len() {
            return Err(ShapeError::Mismatch {
                op: "embed_batch",
                left: vec![maps.len()],
                right: vec![m.len()],
            }
            .into());
        }
    }
    let l = params.dims.out_dim;
    let mut out = Vec::with_capacity(maps.len() * l);
    let mut traces = Vec::with_capacity(maps.len());
    for (b, fm) in maps.iter().enumerate() {
        let mask = masks.map(|m| &m[b]);
        let (emb, trace) = rgm_forward(fm, &params.rgm, &params.nau, params.variant, mask)?;
        out.extend_from_slice(emb.data());
        traces.push(trace);
    }
    Ok((Tensor::matrix(maps.len(), l, out)?, traces))
}

/// Convenience wrapper over [`embed_batch`] for dataset samples without
/// dropout: the inference path.
pub fn embed_samples(params: &HeadParams, samples: &[Sample]) -> Result<Tensor, ModelError> {
    let maps: Vec<&FeatureMap> = samples.iter().map(|s| &s.features).collect();
    embed_batch(params, &maps, None).map(|(emb, _)| emb)
}

/// Pushes per-sample embedding cotangents back through the stored traces,
/// accumulating parameter gradients in ascending sample order.
fn backprop_embeddings(
    params: &HeadParams,
    traces: &[RgmTrace],
    d_emb: &Tensor,
    grads: &mut HeadGrads,
) -> Result<(), ModelError> {
    for (b, trace) in traces.iter().enumerate() {
        let d_row = Tensor::vector(d_emb.row(b).to_vec());
        let g = rgm_backward(&params.rgm, &params.nau, trace, &d_row)?;
        grads.absorb(&g)?;
    }
    Ok(())
}

/// Deterministic in-batch triplet enumeration: each sample anchors one
/// triplet with the nearest following same-identity sample and the
/// nearest following other-identity sample, scanning cyclically. Anchors
/// lacking either partner contribute nothing. Returns index triples
/// (anchor, positive, negative).
pub fn build_triplets(ids: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = ids.len();
    let mut out = Vec::new();
    for a in 0..n {
        let mut positive = None;
        let mut negative = None;
        for step in 1..n {
            let j = (a + step) % n;
            if ids[j] == ids[a] {
                positive.get_or_insert(j);
            } else {
                negative.get_or_insert(j);
            }
            if positive.is_some() && negative.is_some() {
                break;
            }
        }
        if let (Some(p), Some(ng)) = (positive, negative) {
            out.push((a, p, ng));
        }
    }
    out
}

/// One batch's loss value and parameter gradients.
pub fn loss_and_grads(
    params: &HeadParams,
    maps: &[&FeatureMap],
    labels: &[usize],
    spec: &LossSpec,
    masks: Option<&[Tensor]>,
) -> Result<(f64, HeadGrads), ModelError> {
    let (emb, traces) = embed_batch(params, maps, masks)?;
    let mut grads = HeadGrads::zeros_like(params);

    let value = match spec.kind {
        LossKind::Softmax => {
            // raw biased logits: emb * W + b
            let logits = add(
                &matmul(&emb, &params.w_cls)?,
                &broadcast_rows(&params.b_cls, emb.rows())?,
            )?;
            let r = softmax_ce(&logits, labels)?;
            let d_emb = matmul(&r.d_cos, &transpose(&params.w_cls)?)?;
            grads.w_cls = matmul(&transpose(&emb)?, &r.d_cos)?;
            grads.b_cls = column_sums(&r.d_cos);
            backprop_embeddings(params, &traces, &d_emb, &mut grads)?;
            r.value
        }
        LossKind::TripletCond => {
            let triples = build_triplets(labels);
            if triples.is_empty() {
                return Err(ModelError::NoTriplets);
            }
            let l = emb.cols();
            let gather = |pick: fn(&(usize, usize, usize)) -> usize| -> Result<Tensor, ShapeError> {
                let mut data = Vec::with_capacity(triples.len() * l);
                for t in &triples {
                    data.extend_from_slice(emb.row(pick(t)));
                }
                Tensor::matrix(triples.len(), l, data)
            };
            let anchors = gather(|t| t.0)?;
            let positives = gather(|t| t.1)?;
            let negatives = gather(|t| t.2)?;
            let r = triplet_conditional(&anchors, &positives, &negatives, spec.triplet_margin)?;

            // scatter the three per-triplet gradients back onto batch rows
            let mut d = vec![0.0; emb.rows() * l];
            for (k, &(a, p, ng)) in triples.iter().enumerate() {
                for (row, src) in [(a, &r.d_anchor), (p, &r.d_positive), (ng, &r.d_negative)] {
                    for c in 0..l {
                        d[row * l + c] += src.at2(k, c);
                    }
                }
            }
            let d_emb = Tensor::matrix(emb.rows(), l, d)?;
            backprop_embeddings(params, &traces, &d_emb, &mut grads)?;
            r.value
        }
        kind => {
            let cl = cosine_logits(&emb, &params.w_cls)?;
            let r = match kind {
                LossKind::NSoftmax => normalized_softmax(&cl, labels, spec.scale())?,
                LossKind::CSoftmax => c_softmax(&cl, labels, &spec.margin)?,
                LossKind::CosFace => cosface(&cl, labels, spec.additive_margin, spec.scale())?,
                LossKind::ArcFace => arcface(&cl, labels, spec.additive_margin, spec.scale())?,
                _ => unreachable!("handled above"),
            };
            let (d_emb, d_w) = cosine_logits_vjp(&cl, &r.d_cos)?;
            grads.w_cls = d_w;
            backprop_embeddings(params, &traces, &d_emb, &mut grads)?;
            r.value
        }
    };
    Ok((value, grads))
}

fn broadcast_rows(bias: &Tensor, rows: usize) -> Result<Tensor, ShapeError> {
    let m = bias.len();
    let mut data = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        data.extend_from_slice(bias.data());
    }
    Tensor::matrix(rows, m, data)
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += t.at2(i, j);
        }
    }
    Tensor::vector(out)
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

/// Checkpoint sidecar describing the architecture the tensors belong to.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub variant: RgmVariant,
    pub edge_activation: EdgeActivation,
    pub dims: HeadDims,
}

/// Writes `head.toml` plus one tensor file per parameter group under
/// `tensors/`. Rewriting the same params is byte-identical.
pub fn save_checkpoint(dir: &Path, params: &HeadParams) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir.join("tensors")).map_err(crate::io::IoError::from)?;
    let meta = CheckpointMeta {
        variant: params.variant,
        edge_activation: params.rgm.edge_activation,
        dims: params.dims.clone(),
    };
    let text = toml::to_string(&meta).map_err(crate::io::IoError::from)?;
    std::fs::write(dir.join("head.toml"), text).map_err(crate::io::IoError::from)?;
    for (name, tensor) in params.tensors() {
        crate::io::save_tensor(&dir.join("tensors").join(format!("{name}.rgt")), tensor)?;
    }
    Ok(())
}

/// Loads a checkpoint directory, validating every tensor's shape against
/// the architecture in `head.toml`.
pub fn load_checkpoint(dir: &Path) -> Result<HeadParams, ModelError> {
    let text = std::fs::read_to_string(dir.join("head.toml")).map_err(crate::io::IoError::from)?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(crate::io::IoError::from)?;
    meta.dims.validate()?;

    // a zero head of the declared shape is the template the stored
    // tensors must fit
    let mut params = HeadParams {
        dims: meta.dims.clone(),
        variant: meta.variant,
        rgm: RgmParams::zeros(
            meta.dims.channels,
            meta.dims.embed_dim,
            meta.dims.nodes(),
            meta.dims.out_dim,
            meta.edge_activation,
        ),
        nau: NauParams::zeros(meta.dims.nodes(), meta.dims.reduction),
        w_cls: Tensor::zeros(vec![meta.dims.out_dim, meta.dims.classes]),
        b_cls: Tensor::zeros(vec![meta.dims.classes]),
    };
    for (name, slot) in params.tensors_mut() {
        let path = dir.join("tensors").join(format!("{name}.rgt"));
        if !path.exists() {
            return Err(ModelError::MissingParam { name });
        }
        let tensor = crate::io::load_tensor(&path)?;
        if tensor.dims() != slot.dims() {
            return Err(ModelError::ParamShape {
                name,
                expected: slot.dims().to_vec(),
                got: tensor.dims().to_vec(),
            });
        }
        *slot = tensor;
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// head-level gradient checking
// ---------------------------------------------------------------------------

/// Worst relative error of one parameter group.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Outcome of one finite-difference sweep over the assembled head.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub seed: u64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// Sweeps central finite differences over every parameter entry of a
/// randomly initialized head under `spec`, comparing against the analytic
/// gradients. Dropout masks are drawn once and held fixed so the loss is
/// a deterministic function of the parameters. `corrupt` names a
/// parameter group whose analytic gradient is deliberately perturbed,
/// which must make the check fail; it exists so the harness itself stays
/// testable.
pub fn check_gradients(
    dims: &HeadDims,
    variant: RgmVariant,
    activation: EdgeActivation,
    spec: &LossSpec,
    batch: usize,
    seed: u64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport, ModelError> {
    check_gradients_with_step(dims, variant, activation, spec, batch, seed, corrupt, FD_STEP)
}

/// [`check_gradients`] with an explicit difference step. A sweep that
/// misses tolerance at the standard step can be re-run at a smaller one:
/// truncation error shrinks quadratically with the step while a genuine
/// gradient defect stays put, so the pair of sweeps separates the two.
/// The margin losses have an unbounded derivative as a target cosine
/// approaches 1 (the angular ones through arccos), where the difference
/// quotient at a fixed step loses accuracy with the gradient still exact.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients_with_step(
    dims: &HeadDims,
    variant: RgmVariant,
    activation: EdgeActivation,
    spec: &LossSpec,
    batch: usize,
    seed: u64,
    corrupt: Option<&str>,
    h: f64,
) -> Result<GradCheckReport, ModelError> {
    if batch == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if let Some(name) = corrupt {
        if !PARAM_NAMES.contains(&name) {
            return Err(ModelError::UnknownParam {
                name: name.to_string(),
            });
        }
    }
    let mut rng = Rng::new(seed);
    let params = HeadParams::init(dims, variant, activation, &mut rng)?;

    let maps: Vec<FeatureMap> = (0..batch)
        .map(|_| {
            FeatureMap::new(Tensor::normal(
                vec![dims.channels, dims.height, dims.width],
                &mut rng,
                1.0,
            ))
        })
        .collect::<Result<_, _>>()?;
    let map_refs: Vec<&FeatureMap> = maps.iter().collect();
    // triplet batches need identity repeats; classifier labels cycle
    let labels: Vec<usize> = match spec.kind {
        LossKind::TripletCond => (0..batch).map(|b| b / 2).collect(),
        _ => (0..batch).map(|b| b % dims.classes).collect(),
    };
    let masks = batch_dropout_masks(batch, dims.nodes() * dims.channels, 0.5, &mut rng)?;

    let (_, mut analytic) = loss_and_grads(&params, &map_refs, &labels, spec, Some(&masks))?;
    if let Some(name) = corrupt {
        for (g_name, tensor) in analytic.tensors_mut() {
            if g_name == name {
                // nudge one entry enough to trip the tolerance
                let mut data = tensor.data().to_vec();
                data[0] += 1e-3 * (1.0 + data[0].abs());
                *tensor = Tensor::new(tensor.dims().to_vec(), data).expect("same shape");
            }
        }
    }

    let mut per_param = Vec::with_capacity(PARAM_NAMES.len());
    for idx in 0..PARAM_NAMES.len() {
        let (name, base) = params.tensors()[idx];
        let x0 = base.data().to_vec();
        let value = |v: &[f64]| -> f64 {
            let mut p = params.clone();
            let (_, slot) = p.tensors_mut().into_iter().nth(idx).expect("fixed order");
            *slot = Tensor::new(slot.dims().to_vec(), v.to_vec()).expect("same shape");
            let (loss, _) =
                loss_and_grads(&p, &map_refs, &labels, spec, Some(&masks)).expect("forward");
            loss
        };
        let numeric = central_diff(value, &x0, h);
        let analytic_t = analytic.tensors()[idx].1;
        let max_rel_err = analytic_t
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &b)| relative_error(a, b))
            .fold(0.0, f64::max);
        per_param.push(ParamCheck { name, max_rel_err });
    }

    Ok(GradCheckReport {
        loss: spec.kind,
        seed,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GRAD_TOL;

    fn desk_dims() -> HeadDims {
        HeadDims {
            channels: 8,
            height: 4,
            width: 4,
            embed_dim: 4,
            out_dim: 4,
            classes: 3,
            reduction: 2,
        }
    }

    fn random_maps(dims: &HeadDims, count: usize, seed: u64) -> Vec<FeatureMap> {
        let mut rng = Rng::new(seed);
        (0..count)
            .map(|_| {
                FeatureMap::new(Tensor::normal(
                    vec![dims.channels, dims.height, dims.width],
                    &mut rng,
                    1.0,
                ))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn dims_validation_names_the_offender() {
        let mut dims = desk_dims();
        dims.classes = 1;
        assert!(matches!(
            dims.validate().unwrap_err(),
            ModelError::InvalidDims {
                what: "classes",
                min: 2
            }
        ));
        dims.classes = 3;
        dims.height = 0;
        assert!(matches!(
            dims.validate().unwrap_err(),
            ModelError::InvalidDims {
                what: "height",
                min: 1
            }
        ));
    }

    #[test]
    fn loss_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(LossKind::parse_name(kind.name()), Some(kind));
        }
        assert_eq!(LossKind::parse_name("sphereface"), None);
    }

    #[test]
    fn embedding_batch_matches_per_sample_forward() {
        let dims = desk_dims();
        let mut rng = Rng::new(31);
        let params = HeadParams::init(
            &dims,
            RgmVariant::RelationalGated,
            EdgeActivation::Sigmoid,
            &mut rng,
        )
        .unwrap();
        let maps = random_maps(&dims, 3, 32);
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let (batch, _) = embed_batch(&params, &refs, None).unwrap();
        for (b, fm) in maps.iter().enumerate() {
            let (single, _) =
                rgm_forward(fm, &params.rgm, &params.nau, params.variant, None).unwrap();
            assert_eq!(batch.row(b), single.data());
        }
    }

    #[test]
    fn triplet_enumeration_walks_forward_cyclically() {
        // ids [0,0,1,1], worked by hand: anchor 0 finds positive 1 then
        // negative 2; anchor 1 passes negative 2 first, wraps to
        // positive 0; anchors 2 and 3 mirror them
        assert_eq!(
            build_triplets(&[0, 0, 1, 1]),
            vec![(0, 1, 2), (1, 0, 2), (2, 3, 0), (3, 2, 0)]
        );
        // a singleton identity cannot anchor but still serves as negative
        assert_eq!(build_triplets(&[0, 0, 7]), vec![(0, 1, 2), (1, 0, 2)]);
        assert!(build_triplets(&[5, 5, 5]).is_empty());
        assert!(build_triplets(&[1, 2, 3]).is_empty());
    }

    #[test]
    fn triplet_enumeration_matches_first_hit_rule() {
        // independent restatement: positive/negative are the first hits
        // of a full forward scan, no early exit
        let ids = [3usize, 1, 3, 2, 1, 3];
        let got = build_triplets(&ids);
        let mut want = Vec::new();
        for a in 0..ids.len() {
            let mut pos = None;
            let mut neg = None;
            for step in 1..ids.len() {
                let j = (a + step) % ids.len();
                if ids[j] == ids[a] && pos.is_none() {
                    pos = Some(j);
                }
                if ids[j] != ids[a] && neg.is_none() {
                    neg = Some(j);
                }
            }
            if let (Some(p), Some(n)) = (pos, neg) {
                want.push((a, p, n));
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn all_same_identity_batch_has_no_triplets() {
        let dims = desk_dims();
        let mut rng = Rng::new(33);
        let params = HeadParams::init(
            &dims,
            RgmVariant::Relational,
            EdgeActivation::Sigmoid,
            &mut rng,
        )
        .unwrap();
        let maps = random_maps(&dims, 3, 34);
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let spec = LossSpec::new(LossKind::TripletCond);
        assert!(matches!(
            loss_and_grads(&params, &refs, &[5, 5, 5], &spec, None).unwrap_err(),
            ModelError::NoTriplets
        ));
    }

    #[test]
    fn plain_softmax_uses_the_bias_and_angular_losses_do_not() {
        let dims = desk_dims();
        let mut rng = Rng::new(37);
        let params =
            HeadParams::init(&dims, RgmVariant::Linear, EdgeActivation::Sigmoid, &mut rng)
                .unwrap();
        let maps = random_maps(&dims, 3, 38);
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let labels = [0usize, 1, 2];

        let (_, g_plain) = loss_and_grads(
            &params,
            &refs,
            &labels,
            &LossSpec::new(LossKind::Softmax),
            None,
        )
        .unwrap();
        assert!(g_plain.b_cls.data().iter().any(|&v| v != 0.0));

        let (_, g_cos) = loss_and_grads(
            &params,
            &refs,
            &labels,
            &LossSpec::new(LossKind::CosFace),
            None,
        )
        .unwrap();
        assert!(g_cos.b_cls.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_variant_leaves_relational_weights_untouched() {
        let dims = desk_dims();
        let mut rng = Rng::new(39);
        let params =
            HeadParams::init(&dims, RgmVariant::Linear, EdgeActivation::Sigmoid, &mut rng)
                .unwrap();
        let maps = random_maps(&dims, 2, 40);
        let refs: Vec<&FeatureMap> = maps.iter().collect();
        let (_, g) = loss_and_grads(
            &params,
            &refs,
            &[0, 1],
            &LossSpec::new(LossKind::NSoftmax),
            None,
        )
        .unwrap();
        assert!(g.w1.data().iter().all(|&v| v == 0.0));
        assert!(g.we.data().iter().all(|&v| v == 0.0));
        assert!(g.w2.data().iter().all(|&v| v == 0.0));
        assert!(g.nau_wa.data().iter().all(|&v| v == 0.0));
        assert!(g.w_fc.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dims = desk_dims();
        let mut rng = Rng::new(35);
        let params = HeadParams::init(
            &dims,
            RgmVariant::RelationalGated,
            EdgeActivation::Softmax,
            &mut rng,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.dims, params.dims);
        assert_eq!(back.variant, params.variant);
        assert_eq!(back.rgm.edge_activation, params.rgm.edge_activation);
        for ((_, a), (_, b)) in back.tensors().iter().zip(params.tensors().iter()) {
            assert_eq!(a.dims(), b.dims());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_save_is_deterministic() {
        let dims = desk_dims();
        let mut rng = Rng::new(43);
        let params = HeadParams::init(
            &dims,
            RgmVariant::RelationalGated,
            EdgeActivation::Sigmoid,
            &mut rng,
        )
        .unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(d1.path(), &params).unwrap();
        save_checkpoint(d2.path(), &params).unwrap();
        assert_eq!(
            std::fs::read(d1.path().join("head.toml")).unwrap(),
            std::fs::read(d2.path().join("head.toml")).unwrap()
        );
        for name in PARAM_NAMES {
            assert_eq!(
                std::fs::read(d1.path().join(format!("tensors/{name}.rgt"))).unwrap(),
                std::fs::read(d2.path().join(format!("tensors/{name}.rgt"))).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn checkpoint_rejects_missing_and_misshapen_tensors() {
        let dims = desk_dims();
        let mut rng = Rng::new(36);
        let params =
            HeadParams::init(&dims, RgmVariant::Linear, EdgeActivation::Sigmoid, &mut rng)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params).unwrap();

        let we_path = dir.path().join("tensors/we.rgt");
        std::fs::remove_file(&we_path).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            ModelError::MissingParam { name: "we" }
        ));

        crate::io::save_tensor(&we_path, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            ModelError::ParamShape { name: "we", .. }
        ));
    }

    #[test]
    fn head_gradients_pass_for_every_loss_and_variant() {
        let dims = desk_dims();
        for kind in [
            LossKind::Softmax,
            LossKind::CSoftmax,
            LossKind::TripletCond,
        ] {
            for variant in [
                RgmVariant::Linear,
                RgmVariant::Relational,
                RgmVariant::RelationalGated,
            ] {
                let report = check_gradients(
                    &dims,
                    variant,
                    EdgeActivation::Sigmoid,
                    &LossSpec::new(kind),
                    4,
                    41,
                    None,
                )
                .unwrap();
                assert!(
                    report.passed(GRAD_TOL),
                    "{:?}/{:?}: worst {}",
                    kind,
                    variant,
                    report.worst()
                );
            }
        }
    }

    #[test]
    fn softmax_edge_activation_gradients_also_pass() {
        let report = check_gradients(
            &desk_dims(),
            RgmVariant::RelationalGated,
            EdgeActivation::Softmax,
            &LossSpec::new(LossKind::ArcFace),
            4,
            44,
            None,
        )
        .unwrap();
        assert!(report.passed(GRAD_TOL), "worst {}", report.worst());
    }

    #[test]
    fn corrupted_gradient_is_caught_by_the_checker() {
        let dims = desk_dims();
        let report = check_gradients(
            &dims,
            RgmVariant::RelationalGated,
            EdgeActivation::Sigmoid,
            &LossSpec::new(LossKind::CSoftmax),
            4,
            42,
            Some("w_fc"),
        )
        .unwrap();
        assert!(!report.passed(GRAD_TOL));
        let bad = report.per_param.iter().find(|p| p.name == "w_fc").unwrap();
        assert!(bad.max_rel_err >= GRAD_TOL);
    }

    #[test]
    fn gradcheck_rejects_empty_batch_and_unknown_group() {
        let dims = desk_dims();
        assert!(matches!(
            check_gradients(
                &dims,
                RgmVariant::Linear,
                EdgeActivation::Sigmoid,
                &LossSpec::new(LossKind::Softmax),
                0,
                1,
                None,
            )
            .unwrap_err(),
            ModelError::EmptyBatch
        ));
        assert!(matches!(
            check_gradients(
                &dims,
                RgmVariant::Linear,
                EdgeActivation::Sigmoid,
                &LossSpec::new(LossKind::Softmax),
                2,
                1,
                Some("nonsense"),
            )
            .unwrap_err(),
            ModelError::UnknownParam { .. }
        ));
    }
}

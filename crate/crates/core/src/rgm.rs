//! Relational graph head over convolutional feature maps.
//!
//! A C x H x W feature map is read as N = H*W nodes, one per spatial
//! position, each carrying its C-dimensional channel vector. The head scores
//! a directed edge between every ordered node pair from a shared linear form
//! on the concatenated pair, propagates node features along the resulting
//! soft adjacency, optionally recalibrates the propagated nodes with the
//! node attention unit, re-embeds them into channel space, and adds the
//! result back onto the original nodes before a final dropout + linear
//! projection to the embedding:
//!
//! ```text
//! nodes   = layout(fm)                      N x C
//! h       = nodes * W1                      N x d
//! E[i,j]  = we^T [h_i, h_j]                 directed pair scores
//! A       = sigmoid(E)   or row-softmax(E)
//! h*      = A * h
//! h~      = gate(h*)                        node attention, optional
//! out     = nodes + h~ * W2                 residual in channel space
//! emb     = W_fc^T dropout(flatten(out)) + b_fc
//! ```
//!
//! Every forward pass returns an [`RgmTrace`] holding the intermediates the
//! exact backward pass needs; [`rgm_backward`] refuses traces produced under
//! different parameters.
//!
//! [`rm_forward`] is the older pair-concatenation baseline: one shared MLP
//! over all unordered node pairs followed by a single projection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nau::{nau_backward, nau_forward, NauGrads, NauParams, NauTrace};
use crate::tensor::{
    add, hadamard, matmul, matmul_vjp, relu, row_softmax, row_softmax_vjp, sigmoid, sigmoid_vjp,
    ShapeError, Tensor,
};

#[derive(Debug, Error)]
pub enum RgmError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("trace was produced under different parameters; rerun the forward pass")]
    StaleTrace,
}

/// A C x H x W activation volume; the unit every sample is stored as.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor,
}

impl FeatureMap {
    /// Wraps a rank-3 tensor laid out as [channels, height, width].
    pub fn new(tensor: Tensor) -> Result<FeatureMap, ShapeError> {
        if tensor.rank() != 3 {
            return Err(ShapeError::Rank {
                op: "feature_map",
                expected: 3,
                dims: tensor.dims().to_vec(),
            });
        }
        Ok(FeatureMap { tensor })
    }

    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<FeatureMap, ShapeError> {
        Ok(FeatureMap {
            tensor: Tensor::new(vec![channels, height, width], data)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn node_count(&self) -> usize {
        self.height() * self.width()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Reads the feature map as its node matrix: row i (spatial position
/// i = y*W + x in row-major order) is that position's channel vector.
pub fn nodes_from_feature_map(fm: &FeatureMap) -> Tensor {
    let c = fm.channels();
    let n = fm.node_count();
    let src = fm.tensor.data();
    let mut nodes = vec![0.0; n * c];
    for ch in 0..c {
        let plane = &src[ch * n..(ch + 1) * n];
        for i in 0..n {
            nodes[i * c + ch] = plane[i];
        }
    }
    Tensor::matrix(n, c, nodes).expect("layout sizes agree by construction")
}

/// Inverse of [`nodes_from_feature_map`].
pub fn feature_map_from_nodes(
    nodes: &Tensor,
    height: usize,
    width: usize,
) -> Result<FeatureMap, ShapeError> {
    let n = height * width;
    if nodes.rank() != 2 || nodes.rows() != n {
        return Err(ShapeError::Mismatch {
            op: "feature_map_from_nodes",
            left: vec![n],
            right: nodes.dims().to_vec(),
        });
    }
    let c = nodes.cols();
    let mut data = vec![0.0; c * n];
    for i in 0..n {
        for ch in 0..c {
            data[ch * n + i] = nodes.at2(i, ch);
        }
    }
    FeatureMap::from_parts(c, height, width, data)
}

/// How raw edge scores are turned into adjacency weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeActivation {
    /// Independent per-edge weights in (0,1).
    Sigmoid,
    /// Row-normalized weights; each node's outgoing attention sums to 1.
    Softmax,
}

/// Projects nodes into the edge-scoring space: h = nodes * W1.
pub fn embed_nodes(nodes: &Tensor, w1: &Tensor) -> Result<Tensor, ShapeError> {
    matmul(nodes, w1)
}

/// Scores every ordered node pair with the shared linear form
/// E[i,j] = we^T [h_i, h_j] and activates it. Returns (E, A).
///
/// The concatenation makes the score asymmetric in (i, j): the first d
/// weights see the source node, the last d the target, so A is a directed
/// adjacency.
pub fn edge_scores(
    embedded: &Tensor,
    we: &Tensor,
    activation: EdgeActivation,
) -> Result<(Tensor, Tensor), ShapeError> {
    if embedded.rank() != 2 {
        return Err(ShapeError::Rank {
            op: "edge_scores",
            expected: 2,
            dims: embedded.dims().to_vec(),
        });
    }
    let (n, d) = (embedded.rows(), embedded.cols());
    if we.dims() != [2 * d] {
        return Err(ShapeError::Mismatch {
            op: "edge_scores",
            left: vec![2 * d],
            right: we.dims().to_vec(),
        });
    }
    let (w_src, w_dst) = we.data().split_at(d);
    // E[i,j] = <w_src, h_i> + <w_dst, h_j>
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..n {
        let row = embedded.row(i);
        u[i] = row.iter().zip(w_src).map(|(a, b)| a * b).sum();
        v[i] = row.iter().zip(w_dst).map(|(a, b)| a * b).sum();
    }
    let mut e = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            e[i * n + j] = u[i] + v[j];
        }
    }
    let e = Tensor::matrix(n, n, e)?;
    let a = match activation {
        EdgeActivation::Sigmoid => sigmoid(&e),
        EdgeActivation::Softmax => row_softmax(&e)?,
    };
    Ok((e, a))
}

/// Pullback of [`edge_scores`] given the forward adjacency `a` and its
/// cotangent. Returns (d_embedded, d_we).
pub fn edge_scores_vjp(
    embedded: &Tensor,
    we: &Tensor,
    a: &Tensor,
    activation: EdgeActivation,
    d_a: &Tensor,
) -> Result<(Tensor, Tensor), ShapeError> {
    let (n, d) = (embedded.rows(), embedded.cols());
    let d_e = match activation {
        EdgeActivation::Sigmoid => sigmoid_vjp(a, d_a)?,
        EdgeActivation::Softmax => row_softmax_vjp(a, d_a)?,
    };
    // E[i,j] = u_i + v_j: du_i = row sums of dE, dv_j = column sums.
    let mut d_u = vec![0.0; n];
    let mut d_v = vec![0.0; n];
    for i in 0..n {
        let row = d_e.row(i);
        for j in 0..n {
            d_u[i] += row[j];
            d_v[j] += row[j];
        }
    }
    let (w_src, w_dst) = we.data().split_at(d);
    let mut d_we = vec![0.0; 2 * d];
    let mut d_embedded = vec![0.0; n * d];
    for i in 0..n {
        let row = embedded.row(i);
        for k in 0..d {
            d_we[k] += d_u[i] * row[k];
            d_we[d + k] += d_v[i] * row[k];
            d_embedded[i * d + k] = d_u[i] * w_src[k] + d_v[i] * w_dst[k];
        }
    }
    Ok((
        Tensor::matrix(n, d, d_embedded)?,
        Tensor::vector(d_we),
    ))
}

/// Mixes node features along the adjacency: out_i = sum_k A[i,k] * nodes_k.
pub fn propagate(adjacency: &Tensor, nodes: &Tensor) -> Result<Tensor, ShapeError> {
    matmul(adjacency, nodes)
}

/// Which blocks of the head are active. The linear baseline disables the
/// whole relational branch; the middle ablation keeps propagation but
/// replaces the node gate with identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RgmVariant {
    /// Frozen-feature linear head: embedding of the raw nodes only.
    Linear,
    /// Relational propagation without the node gate.
    Relational,
    /// Full head: propagation plus node attention.
    RelationalGated,
}

impl RgmVariant {
    pub fn relational(self) -> bool {
        !matches!(self, RgmVariant::Linear)
    }

    pub fn gated(self) -> bool {
        matches!(self, RgmVariant::RelationalGated)
    }
}

/// Learnable weights of the relational head. Only the final projection
/// carries a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RgmParams {
    /// C x d node embedding.
    pub w1: Tensor,
    /// Length-2d shared edge form.
    pub we: Tensor,
    /// d x C re-embedding of propagated nodes.
    pub w2: Tensor,
    /// (N*C) x L final projection.
    pub w_fc: Tensor,
    /// Length-L projection bias.
    pub b_fc: Tensor,
    pub edge_activation: EdgeActivation,
}

impl RgmParams {
    pub fn zeros(
        channels: usize,
        embed_dim: usize,
        nodes: usize,
        out_dim: usize,
        edge_activation: EdgeActivation,
    ) -> RgmParams {
        RgmParams {
            w1: Tensor::zeros(vec![channels, embed_dim]),
            we: Tensor::zeros(vec![2 * embed_dim]),
            w2: Tensor::zeros(vec![embed_dim, channels]),
            w_fc: Tensor::zeros(vec![nodes * channels, out_dim]),
            b_fc: Tensor::zeros(vec![out_dim]),
            edge_activation,
        }
    }

    /// Scaled-normal initialization (std = 1/sqrt(fan_in) per block).
    pub fn init(
        channels: usize,
        embed_dim: usize,
        nodes: usize,
        out_dim: usize,
        edge_activation: EdgeActivation,
        rng: &mut crate::rng::Rng,
    ) -> RgmParams {
        RgmParams {
            w1: Tensor::normal(
                vec![channels, embed_dim],
                rng,
                1.0 / (channels as f64).sqrt(),
            ),
            we: Tensor::normal(vec![2 * embed_dim], rng, 1.0 / (2.0 * embed_dim as f64).sqrt()),
            w2: Tensor::normal(vec![embed_dim, channels], rng, 1.0 / (embed_dim as f64).sqrt()),
            w_fc: Tensor::normal(
                vec![nodes * channels, out_dim],
                rng,
                1.0 / ((nodes * channels) as f64).sqrt(),
            ),
            b_fc: Tensor::zeros(vec![out_dim]),
            edge_activation,
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b_fc.dims()[0]
    }
}

/// Gradients of [`RgmParams`] plus the input feature map, all shaped like
/// their primals. Inactive blocks of a variant report zero gradients.
#[derive(Debug, Clone)]
pub struct RgmGrads {
    pub w1: Tensor,
    pub we: Tensor,
    pub w2: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub nau: NauGrads,
    /// Cotangent of the input, in feature-map layout (C x H x W).
    pub input: Tensor,
}

/// Intermediates of one forward pass. Also the hook for visual diagnostics:
/// adjacency, node gates, and the pre-/post-residual node matrices.
#[derive(Debug, Clone)]
pub struct RgmTrace {
    fingerprint: u64,
    variant: RgmVariant,
    height: usize,
    width: usize,
    nodes: Tensor,
    embedded: Option<Tensor>,
    edge_pre: Option<Tensor>,
    adjacency: Option<Tensor>,
    propagated: Option<Tensor>,
    nau: Option<NauTrace>,
    recalibrated: Option<Tensor>,
    update: Option<Tensor>,
    out_nodes: Tensor,
    flat_dropped: Tensor,
    mask: Option<Tensor>,
}

impl RgmTrace {
    /// Raw pair scores E, present when the relational branch ran.
    pub fn edge_pre(&self) -> Option<&Tensor> {
        self.edge_pre.as_ref()
    }

    /// Activated adjacency A.
    pub fn adjacency(&self) -> Option<&Tensor> {
        self.adjacency.as_ref()
    }

    /// Per-node gate values from the node attention unit.
    pub fn node_scales(&self) -> Option<&Tensor> {
        self.nau.as_ref().map(|t| t.scales())
    }

    /// Adjacency-propagated nodes A * h before any gating.
    pub fn propagated_nodes(&self) -> Option<&Tensor> {
        self.propagated.as_ref()
    }

    /// Residual update r = h~ * W2 before it is added onto the nodes.
    pub fn relational_update(&self) -> Option<&Tensor> {
        self.update.as_ref()
    }

    /// Node matrix after the residual addition.
    pub fn output_nodes(&self) -> &Tensor {
        &self.out_nodes
    }

    pub fn input_nodes(&self) -> &Tensor {
        &self.nodes
    }
}

/// Inverted dropout mask: each entry is 0 with probability `p`, else
/// 1/(1-p), so the masked activations keep their expectation and inference
/// needs no rescaling.
pub fn dropout_mask(len: usize, p: f64, rng: &mut crate::rng::Rng) -> Result<Tensor, ShapeError> {
    if !(0.0..1.0).contains(&p) {
        return Err(ShapeError::NonFinite {
            op: "dropout_mask",
            index: 0,
        });
    }
    let keep = 1.0 / (1.0 - p);
    let data = (0..len)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    Ok(Tensor::vector(data))
}

fn fold_bits(mut h: u64, bits: u64) -> u64 {
    h ^= bits;
    h.wrapping_mul(0x0000_0100_0000_01B3)
}

fn params_fingerprint(params: &RgmParams, nau: &NauParams, variant: RgmVariant) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325; // FNV-1a offset basis
    h = fold_bits(h, variant as u64);
    h = fold_bits(h, params.edge_activation as u64);
    for t in [
        &params.w1,
        &params.we,
        &params.w2,
        &params.w_fc,
        &params.b_fc,
        &nau.wa,
        &nau.wb,
    ] {
        for &d in t.dims() {
            h = fold_bits(h, d as u64);
        }
        for &v in t.data() {
            h = fold_bits(h, v.to_bits());
        }
    }
    h
}

/// Runs the head on one feature map. `dropout` is the flattened-node mask
/// for training passes (see [`dropout_mask`]); pass `None` at inference.
/// Returns the L-dimensional embedding and the backward trace.
pub fn rgm_forward(
    fm: &FeatureMap,
    params: &RgmParams,
    nau_params: &NauParams,
    variant: RgmVariant,
    dropout: Option<&Tensor>,
) -> Result<(Tensor, RgmTrace), RgmError> {
    let n = fm.node_count();
    let c = fm.channels();
    if params.w1.dims()[0] != c {
        return Err(ShapeError::Mismatch {
            op: "rgm_forward",
            left: params.w1.dims().to_vec(),
            right: vec![c],
        }
        .into());
    }
    if params.w_fc.dims()[0] != n * c {
        return Err(ShapeError::Mismatch {
            op: "rgm_forward",
            left: params.w_fc.dims().to_vec(),
            right: vec![n * c],
        }
        .into());
    }

    let nodes = nodes_from_feature_map(fm);

    let mut embedded = None;
    let mut edge_pre = None;
    let mut adjacency = None;
    let mut propagated = None;
    let mut nau_trace = None;
    let mut recalibrated = None;
    let mut update = None;

    let out_nodes = if variant.relational() {
        let h = embed_nodes(&nodes, &params.w1)?;
        let (e, a) = edge_scores(&h, &params.we, params.edge_activation)?;
        let h_star = propagate(&a, &h)?;
        let h_tilde = if variant.gated() {
            let (gated, trace) = nau_forward(&h_star, nau_params)?;
            nau_trace = Some(trace);
            gated
        } else {
            h_star.clone()
        };
        let r = matmul(&h_tilde, &params.w2)?;
        let out = add(&nodes, &r)?;
        embedded = Some(h);
        edge_pre = Some(e);
        adjacency = Some(a);
        propagated = Some(h_star);
        recalibrated = Some(h_tilde);
        update = Some(r);
        out
    } else {
        nodes.clone()
    };

    let flat = out_nodes.reshape(vec![1, n * c])?;
    let flat_dropped = match dropout {
        Some(mask) => {
            let mask_row = mask.reshape(vec![1, n * c])?;
            hadamard(&flat, &mask_row)?
        }
        None => flat,
    };
    let emb = matmul(&flat_dropped, &params.w_fc)?;
    let emb = add(&emb, &params.b_fc.reshape(vec![1, params.out_dim()])?)?
        .reshape(vec![params.out_dim()])?;

    let trace = RgmTrace {
        fingerprint: params_fingerprint(params, nau_params, variant),
        variant,
        height: fm.height(),
        width: fm.width(),
        nodes,
        embedded,
        edge_pre,
        adjacency,
        propagated,
        nau: nau_trace,
        recalibrated,
        update,
        out_nodes,
        flat_dropped,
        mask: dropout.cloned(),
    };
    Ok((emb, trace))
}

/// Exact reverse pass of [`rgm_forward`]. The trace must come from a forward
/// pass under the *same* parameters and variant; anything else is refused as
/// [`RgmError::StaleTrace`].
pub fn rgm_backward(
    params: &RgmParams,
    nau_params: &NauParams,
    trace: &RgmTrace,
    d_embedding: &Tensor,
) -> Result<RgmGrads, RgmError> {
    if params_fingerprint(params, nau_params, trace.variant) != trace.fingerprint {
        return Err(RgmError::StaleTrace);
    }
    let n = trace.nodes.rows();
    let c = trace.nodes.cols();
    let l = params.out_dim();
    if d_embedding.dims() != [l] {
        return Err(ShapeError::Mismatch {
            op: "rgm_backward",
            left: vec![l],
            right: d_embedding.dims().to_vec(),
        }
        .into());
    }

    // projection: emb = flat_dropped * W_fc + b_fc
    let d_emb_row = d_embedding.reshape(vec![1, l])?;
    let d_b_fc = d_embedding.clone();
    let (d_flat_dropped, d_w_fc) = matmul_vjp(&trace.flat_dropped, &params.w_fc, &d_emb_row)?;

    // dropout is a fixed elementwise mask, so its pullback is the same mask
    let d_flat = match &trace.mask {
        Some(mask) => hadamard(&d_flat_dropped, &mask.reshape(vec![1, n * c])?)?,
        None => d_flat_dropped,
    };
    let d_out_nodes = d_flat.reshape(vec![n, c])?;

    let (d_nodes, d_w1, d_we, d_w2, d_nau) = if trace.variant.relational() {
        let h = trace.embedded.as_ref().expect("relational trace has h");
        let a = trace.adjacency.as_ref().expect("relational trace has A");
        let h_tilde = trace
            .recalibrated
            .as_ref()
            .expect("relational trace has h~");

        // residual: out = nodes + r, so both summands see d_out_nodes
        let (d_h_tilde, d_w2) = matmul_vjp(h_tilde, &params.w2, &d_out_nodes)?;

        let (d_h_star, nau_grads) = if trace.variant.gated() {
            let nt = trace.nau.as_ref().expect("gated trace has gate state");
            nau_backward(nau_params, nt, &d_h_tilde)?
        } else {
            (
                d_h_tilde,
                NauGrads {
                    wa: Tensor::zeros(nau_params.wa.dims().to_vec()),
                    wb: Tensor::zeros(nau_params.wb.dims().to_vec()),
                },
            )
        };

        // propagation: h* = A h
        let (d_a, d_h_prop) = matmul_vjp(a, h, &d_h_star)?;
        let (d_h_edges, d_we) =
            edge_scores_vjp(h, &params.we, a, params.edge_activation, &d_a)?;
        let d_h = add(&d_h_prop, &d_h_edges)?;

        // embedding: h = nodes W1
        let (d_nodes_rel, d_w1) = matmul_vjp(&trace.nodes, &params.w1, &d_h)?;
        let d_nodes = add(&d_out_nodes, &d_nodes_rel)?;
        (d_nodes, d_w1, d_we, d_w2, nau_grads)
    } else {
        (
            d_out_nodes,
            Tensor::zeros(params.w1.dims().to_vec()),
            Tensor::zeros(params.we.dims().to_vec()),
            Tensor::zeros(params.w2.dims().to_vec()),
            NauGrads {
                wa: Tensor::zeros(nau_params.wa.dims().to_vec()),
                wb: Tensor::zeros(nau_params.wb.dims().to_vec()),
            },
        )
    };

    let d_input = feature_map_from_nodes(&d_nodes, trace.height, trace.width)?;
    Ok(RgmGrads {
        w1: d_w1,
        we: d_we,
        w2: d_w2,
        w_fc: d_w_fc,
        b_fc: d_b_fc,
        nau: d_nau,
        input: d_input.tensor().clone(),
    })
}

// ---------------------------------------------------------------------------
// pair-concatenation relation module
// ---------------------------------------------------------------------------

/// Unordered pair count including self-pairs: N(N+1)/2.
pub fn pair_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Unordered node pairs (i, j) with i <= j in lexicographic order.
pub fn unordered_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
}

/// Weights of the pair-based relation head: a shared pair embedding
/// (2C -> Lr) with ReLU, then one projection of all concatenated relation
/// vectors to the embedding. Only the projection has a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RmParams {
    /// 2C x Lr shared pair embedding.
    pub wg: Tensor,
    /// (P * Lr) x L projection, P = N(N+1)/2.
    pub w_out: Tensor,
    /// Length-L projection bias.
    pub b_out: Tensor,
}

impl RmParams {
    pub fn init(
        channels: usize,
        relation_dim: usize,
        nodes: usize,
        out_dim: usize,
        rng: &mut crate::rng::Rng,
    ) -> RmParams {
        let p = pair_count(nodes);
        RmParams {
            wg: Tensor::normal(
                vec![2 * channels, relation_dim],
                rng,
                1.0 / (2.0 * channels as f64).sqrt(),
            ),
            w_out: Tensor::normal(
                vec![p * relation_dim, out_dim],
                rng,
                1.0 / ((p * relation_dim) as f64).sqrt(),
            ),
            b_out: Tensor::zeros(vec![out_dim]),
        }
    }
}

/// Embeds the feature map through the pair-based relation head: every
/// unordered node pair (self-pairs included) is embedded by the shared map
/// relu([f_i, f_j] * Wg), the P relation vectors are concatenated in pair
/// order, and a single linear layer projects them to the output embedding.
pub fn rm_forward(fm: &FeatureMap, params: &RmParams) -> Result<Tensor, ShapeError> {
    let nodes = nodes_from_feature_map(fm);
    let n = nodes.rows();
    let c = nodes.cols();
    if params.wg.dims()[0] != 2 * c {
        return Err(ShapeError::Mismatch {
            op: "rm_forward",
            left: params.wg.dims().to_vec(),
            right: vec![2 * c],
        });
    }
    let lr = params.wg.dims()[1];
    let p = pair_count(n);
    if params.w_out.dims()[0] != p * lr {
        return Err(ShapeError::Mismatch {
            op: "rm_forward",
            left: params.w_out.dims().to_vec(),
            right: vec![p * lr],
        });
    }

    let mut pair_input = vec![0.0; 2 * c];
    let mut relations = vec![0.0; p * lr];
    for (slot, (i, j)) in unordered_pairs(n).enumerate() {
        pair_input[..c].copy_from_slice(nodes.row(i));
        pair_input[c..].copy_from_slice(nodes.row(j));
        let pair = Tensor::matrix(1, 2 * c, pair_input.clone())?;
        let rel = relu(&matmul(&pair, &params.wg)?);
        relations[slot * lr..(slot + 1) * lr].copy_from_slice(rel.data());
    }

    let concat = Tensor::matrix(1, p * lr, relations)?;
    let out = matmul(&concat, &params.w_out)?;
    let l = params.b_out.dims()[0];
    add(&out, &params.b_out.reshape(vec![1, l])?)?.reshape(vec![l])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_relative_error, FD_STEP, GRAD_TOL};
    use crate::rng::Rng;
    use crate::tensor::max_abs_diff;

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(Tensor::normal(vec![c, h, w], &mut Rng::new(seed), 1.0)).unwrap()
    }

    #[test]
    fn node_layout_of_2x2_single_channel_map() {
        let fm = FeatureMap::from_parts(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let nodes = nodes_from_feature_map(&fm);
        assert_eq!(nodes.dims(), &[4, 1]);
        assert_eq!(nodes.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_map_gives_identical_rows() {
        let fm = FeatureMap::from_parts(3, 2, 2, vec![5.0; 12]).unwrap();
        let nodes = nodes_from_feature_map(&fm);
        for i in 0..4 {
            assert_eq!(nodes.row(i), &[5.0, 5.0, 5.0]);
        }
    }

    #[test]
    fn node_layout_round_trips() {
        let fm = rand_map(6, 3, 4, 1);
        let nodes = nodes_from_feature_map(&fm);
        let back = feature_map_from_nodes(&nodes, 3, 4).unwrap();
        assert_eq!(back, fm);
    }

    #[test]
    fn node_channel_vector_matches_spatial_position() {
        let fm = rand_map(5, 2, 3, 2);
        let nodes = nodes_from_feature_map(&fm);
        // node at (y=1, x=2) is row 1*3+2 = 5
        for ch in 0..5 {
            assert_eq!(nodes.at2(5, ch), fm.tensor().data()[ch * 6 + 5]);
        }
    }

    #[test]
    fn embed_with_identity_is_identity() {
        let fm = rand_map(4, 2, 2, 3);
        let nodes = nodes_from_feature_map(&fm);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let w1 = Tensor::matrix(4, 4, eye).unwrap();
        assert_eq!(embed_nodes(&nodes, &w1).unwrap(), nodes);
    }

    #[test]
    fn zero_edge_weights_give_uniform_half_adjacency() {
        let fm = rand_map(3, 2, 2, 4);
        let h = embed_nodes(&nodes_from_feature_map(&fm), &Tensor::normal(vec![3, 2], &mut Rng::new(5), 1.0)).unwrap();
        let (e, a) = edge_scores(&h, &Tensor::zeros(vec![4]), EdgeActivation::Sigmoid).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert!(a.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn source_selecting_edge_weights_broadcast_along_rows() {
        // we looks only at the source node's first coordinate; the row of a
        // node whose first coordinate is 2 scores every outgoing edge at 2.
        let h = Tensor::matrix(3, 2, vec![2.0, 7.0, -1.0, 4.0, 0.5, -3.0]).unwrap();
        let mut we = vec![0.0; 4];
        we[0] = 1.0;
        let (e, a) = edge_scores(&h, &Tensor::vector(we), EdgeActivation::Sigmoid).unwrap();
        for j in 0..3 {
            assert_eq!(e.at2(0, j), 2.0);
            assert!((a.at2(0, j) - 0.8807970779778823).abs() < 1e-15);
            assert_eq!(e.at2(1, j), -1.0);
        }
    }

    #[test]
    fn edge_scores_match_double_loop_oracle() {
        let mut rng = Rng::new(6);
        let h = Tensor::normal(vec![5, 3], &mut rng, 1.0);
        let we = Tensor::normal(vec![6], &mut rng, 1.0);
        let (e, _) = edge_scores(&h, &we, EdgeActivation::Sigmoid).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += we.data()[k] * h.at2(i, k) + we.data()[3 + k] * h.at2(j, k);
                }
                assert!((e.at2(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn adjacency_is_directed_for_generic_nodes() {
        let mut rng = Rng::new(7);
        let h = Tensor::normal(vec![4, 3], &mut rng, 1.0);
        let we = Tensor::normal(vec![6], &mut rng, 1.0);
        let (_, a) = edge_scores(&h, &we, EdgeActivation::Sigmoid).unwrap();
        let mut asym = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                asym = asym.max((a.at2(i, j) - a.at2(j, i)).abs());
            }
        }
        assert!(asym > 1e-6, "adjacency unexpectedly symmetric");
    }

    #[test]
    fn adjacency_bounds_and_row_sums() {
        let mut rng = Rng::new(8);
        let h = Tensor::normal(vec![6, 4], &mut rng, 2.0);
        let we = Tensor::normal(vec![8], &mut rng, 1.0);
        let (_, sig) = edge_scores(&h, &we, EdgeActivation::Sigmoid).unwrap();
        assert!(sig.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (_, soft) = edge_scores(&h, &we, EdgeActivation::Softmax).unwrap();
        for i in 0..6 {
            let s: f64 = soft.row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn edges_and_propagation_are_permutation_equivariant() {
        let mut rng = Rng::new(9);
        let n = 5;
        let h = Tensor::normal(vec![n, 3], &mut rng, 1.0);
        let we = Tensor::normal(vec![6], &mut rng, 1.0);
        let perm = [2usize, 0, 4, 1, 3];

        let permuted = {
            let mut data = vec![0.0; n * 3];
            for (inew, iold) in perm.iter().enumerate() {
                data[inew * 3..(inew + 1) * 3].copy_from_slice(h.row(*iold));
            }
            Tensor::matrix(n, 3, data).unwrap()
        };

        for act in [EdgeActivation::Sigmoid, EdgeActivation::Softmax] {
            let (_, a) = edge_scores(&h, &we, act).unwrap();
            let (_, ap) = edge_scores(&permuted, &we, act).unwrap();
            for (inew, iold) in perm.iter().enumerate() {
                for (jnew, jold) in perm.iter().enumerate() {
                    assert!((ap.at2(inew, jnew) - a.at2(*iold, *jold)).abs() <= 1e-12);
                }
            }
            let prop = propagate(&a, &h).unwrap();
            let prop_p = propagate(&ap, &permuted).unwrap();
            for (inew, iold) in perm.iter().enumerate() {
                for k in 0..3 {
                    assert!((prop_p.at2(inew, k) - prop.at2(*iold, k)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn propagate_identity_and_uniform_cases() {
        let mut rng = Rng::new(10);
        let h = Tensor::normal(vec![4, 3], &mut rng, 1.0);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let id = Tensor::matrix(4, 4, eye).unwrap();
        assert_eq!(propagate(&id, &h).unwrap(), h);

        let ones = Tensor::filled(vec![4, 4], 1.0);
        let summed = propagate(&ones, &h).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                let col_sum: f64 = (0..4).map(|r| h.at2(r, k)).sum();
                assert!((summed.at2(i, k) - col_sum).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn propagate_is_linear_in_nodes() {
        let mut rng = Rng::new(11);
        let a = Tensor::normal(vec![4, 4], &mut rng, 1.0);
        let x = Tensor::normal(vec![4, 3], &mut rng, 1.0);
        let y = Tensor::normal(vec![4, 3], &mut rng, 1.0);
        let joint = propagate(&a, &add(&x, &y).unwrap()).unwrap();
        let split = add(&propagate(&a, &x).unwrap(), &propagate(&a, &y).unwrap()).unwrap();
        assert!(max_abs_diff(&joint, &split) <= 1e-12);
    }

    #[test]
    fn edge_scores_pullback_matches_finite_differences() {
        for act in [EdgeActivation::Sigmoid, EdgeActivation::Softmax] {
            let mut rng = Rng::new(12);
            let h = Tensor::normal(vec![4, 3], &mut rng, 1.0);
            let we = Tensor::normal(vec![6], &mut rng, 1.0);
            let w = Tensor::normal(vec![4, 4], &mut rng, 1.0);

            let score = |h: &Tensor, we: &Tensor| -> f64 {
                let (_, a) = edge_scores(h, we, act).unwrap();
                a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
            };

            let (_, a) = edge_scores(&h, &we, act).unwrap();
            let (d_h, d_we) = edge_scores_vjp(&h, &we, &a, act, &w).unwrap();

            let num_h = central_diff(
                |v| score(&Tensor::matrix(4, 3, v.to_vec()).unwrap(), &we),
                h.data(),
                FD_STEP,
            );
            let num_we = central_diff(
                |v| score(&h, &Tensor::vector(v.to_vec())),
                we.data(),
                FD_STEP,
            );
            assert!(max_relative_error(d_h.data(), &num_h) < GRAD_TOL);
            assert!(max_relative_error(d_we.data(), &num_we) < GRAD_TOL);
        }
    }

    fn desk_setup(seed: u64, variant: RgmVariant) -> (FeatureMap, RgmParams, NauParams) {
        let fm = rand_map(8, 4, 4, seed);
        let mut rng = Rng::new(seed + 1000);
        let params = RgmParams::init(8, 4, 16, 4, EdgeActivation::Sigmoid, &mut rng);
        let nau = NauParams::init(16, 2, &mut rng);
        let _ = variant;
        (fm, params, nau)
    }

    #[test]
    fn zero_weights_and_bias_give_zero_embedding() {
        let fm = rand_map(3, 2, 2, 20);
        let params = RgmParams::zeros(3, 2, 4, 5, EdgeActivation::Sigmoid);
        let nau = NauParams::zeros(4, 2);
        let (emb, _) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_w2_reduces_to_frozen_feature_linear_head() {
        let fm = rand_map(4, 2, 3, 21);
        let mut rng = Rng::new(22);
        let mut params = RgmParams::init(4, 3, 6, 5, EdgeActivation::Sigmoid, &mut rng);
        params.w2 = Tensor::zeros(vec![3, 4]);
        let nau = NauParams::init(6, 2, &mut rng);

        let (emb, _) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();

        // frozen-feature head computed directly
        let nodes = nodes_from_feature_map(&fm);
        let flat = nodes.reshape(vec![1, 24]).unwrap();
        let direct = add(
            &matmul(&flat, &params.w_fc).unwrap(),
            &params.b_fc.reshape(vec![1, 5]).unwrap(),
        )
        .unwrap()
        .reshape(vec![5])
        .unwrap();
        assert!(max_abs_diff(&emb, &direct) <= 1e-12);

        // and the linear variant is the same function
        let (emb_lin, _) = rgm_forward(&fm, &params, &nau, RgmVariant::Linear, None).unwrap();
        assert!(max_abs_diff(&emb, &emb_lin) <= 1e-12);
    }

    #[test]
    fn forward_matches_composed_op_oracle() {
        // rgm_forward against an independent composition of the published
        // pieces, full variant with gate.
        let (fm, params, nau) = desk_setup(23, RgmVariant::RelationalGated);
        let (emb, _) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();

        let nodes = nodes_from_feature_map(&fm);
        let h = matmul(&nodes, &params.w1).unwrap();
        let (_, a) = edge_scores(&h, &params.we, params.edge_activation).unwrap();
        let h_star = matmul(&a, &h).unwrap();
        let (h_tilde, _) = nau_forward(&h_star, &nau).unwrap();
        let r = matmul(&h_tilde, &params.w2).unwrap();
        let out = add(&nodes, &r).unwrap();
        let flat = out.reshape(vec![1, 128]).unwrap();
        let oracle = add(
            &matmul(&flat, &params.w_fc).unwrap(),
            &params.b_fc.reshape(vec![1, 4]).unwrap(),
        )
        .unwrap()
        .reshape(vec![4])
        .unwrap();

        assert!(max_abs_diff(&emb, &oracle) <= 1e-10);
    }

    #[test]
    fn trace_records_visualization_state() {
        let (fm, params, nau) = desk_setup(24, RgmVariant::RelationalGated);
        let (_, trace) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();
        let a = trace.adjacency().unwrap();
        assert_eq!(a.dims(), &[16, 16]);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let s = trace.node_scales().unwrap();
        assert_eq!(s.dims(), &[16]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let pre = trace.relational_update().unwrap();
        let post = trace.output_nodes();
        let recomposed = add(trace.input_nodes(), pre).unwrap();
        assert!(max_abs_diff(&recomposed, post) <= 1e-12);
    }

    #[test]
    fn stale_trace_is_refused() {
        let (fm, params, nau) = desk_setup(25, RgmVariant::RelationalGated);
        let (emb, trace) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();

        let mut tweaked = params.clone();
        let mut data = tweaked.w1.data().to_vec();
        data[0] += 1.0;
        tweaked.w1 = Tensor::new(tweaked.w1.dims().to_vec(), data).unwrap();

        let d = Tensor::filled(vec![emb.len()], 1.0);
        let err = rgm_backward(&tweaked, &nau, &trace, &d).unwrap_err();
        assert!(matches!(err, RgmError::StaleTrace));
        // unchanged parameters still work
        assert!(rgm_backward(&params, &nau, &trace, &d).is_ok());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let (fm, params, nau) = desk_setup(26, RgmVariant::RelationalGated);
        let (_, trace) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();
        let grads =
            rgm_backward(&params, &nau, &trace, &Tensor::zeros(vec![4])).unwrap();
        for t in [
            &grads.w1,
            &grads.we,
            &grads.w2,
            &grads.w_fc,
            &grads.b_fc,
            &grads.nau.wa,
            &grads.nau.wb,
            &grads.input,
        ] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_gradient_is_outer_product_of_flat_input() {
        let (fm, params, nau) = desk_setup(27, RgmVariant::RelationalGated);
        let (_, trace) =
            rgm_forward(&fm, &params, &nau, RgmVariant::RelationalGated, None).unwrap();
        let d = Tensor::normal(vec![4], &mut Rng::new(28), 1.0);
        let grads = rgm_backward(&params, &nau, &trace, &d).unwrap();
        let flat = trace.flat_dropped.data();
        for p in 0..flat.len() {
            for l in 0..4 {
                assert!((grads.w_fc.at2(p, l) - flat[p] * d.data()[l]).abs() <= 1e-12);
            }
        }
        assert_eq!(grads.b_fc, d);
    }

    fn full_head_scalar(
        fm: &FeatureMap,
        params: &RgmParams,
        nau: &NauParams,
        variant: RgmVariant,
        mask: Option<&Tensor>,
        probe: &Tensor,
    ) -> f64 {
        let (emb, _) = rgm_forward(fm, params, nau, variant, mask).unwrap();
        emb.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences_for_all_variants() {
        for (variant, seed) in [
            (RgmVariant::Linear, 30),
            (RgmVariant::Relational, 31),
            (RgmVariant::RelationalGated, 32),
        ] {
            let (fm, params, nau) = desk_setup(seed, variant);
            let probe = Tensor::normal(vec![4], &mut Rng::new(seed + 50), 1.0);
            // fixed dropout mask exercises the masked path end to end
            let mask = dropout_mask(128, 0.5, &mut Rng::new(seed + 60)).unwrap();

            let (_, trace) =
                rgm_forward(&fm, &params, &nau, variant, Some(&mask)).unwrap();
            let grads = rgm_backward(&params, &nau, &trace, &probe).unwrap();

            let check = |analytic: &Tensor, numeric: &[f64], what: &str| {
                let err = max_relative_error(analytic.data(), numeric);
                assert!(err < GRAD_TOL, "{variant:?} {what}: max rel err {err}");
            };

            let num = central_diff(
                |v| {
                    let f = FeatureMap::new(Tensor::new(vec![8, 4, 4], v.to_vec()).unwrap())
                        .unwrap();
                    full_head_scalar(&f, &params, &nau, variant, Some(&mask), &probe)
                },
                fm.tensor().data(),
                FD_STEP,
            );
            check(&grads.input, &num, "input");

            macro_rules! check_param {
                ($field:ident, $dims:expr, $rebuild:expr) => {{
                    let num = central_diff(
                        |v| {
                            let t = Tensor::new($dims, v.to_vec()).unwrap();
                            let p = $rebuild(t);
                            full_head_scalar(&fm, &p.0, &p.1, variant, Some(&mask), &probe)
                        },
                        params_field(&params, &nau, stringify!($field)),
                        FD_STEP,
                    );
                    check(&grads.$field, &num, stringify!($field));
                }};
            }

            fn params_field<'a>(
                p: &'a RgmParams,
                q: &'a NauParams,
                name: &str,
            ) -> &'a [f64] {
                match name {
                    "w1" => p.w1.data(),
                    "we" => p.we.data(),
                    "w2" => p.w2.data(),
                    "w_fc" => p.w_fc.data(),
                    "b_fc" => p.b_fc.data(),
                    "wa" => q.wa.data(),
                    "wb" => q.wb.data(),
                    _ => unreachable!(),
                }
            }

            if variant.relational() {
                check_param!(w1, vec![8, 4], |t| (
                    RgmParams { w1: t, ..params.clone() },
                    nau.clone()
                ));
                check_param!(we, vec![8], |t| (
                    RgmParams { we: t, ..params.clone() },
                    nau.clone()
                ));
                check_param!(w2, vec![4, 8], |t| (
                    RgmParams { w2: t, ..params.clone() },
                    nau.clone()
                ));
            }
            check_param!(w_fc, vec![128, 4], |t| (
                RgmParams { w_fc: t, ..params.clone() },
                nau.clone()
            ));
            check_param!(b_fc, vec![4], |t| (
                RgmParams { b_fc: t, ..params.clone() },
                nau.clone()
            ));
            if variant.gated() {
                let num_wa = central_diff(
                    |v| {
                        let q = NauParams {
                            wa: Tensor::new(vec![16, 8], v.to_vec()).unwrap(),
                            wb: nau.wb.clone(),
                        };
                        full_head_scalar(&fm, &params, &q, variant, Some(&mask), &probe)
                    },
                    nau.wa.data(),
                    FD_STEP,
                );
                check(&grads.nau.wa, &num_wa, "wa");
                let num_wb = central_diff(
                    |v| {
                        let q = NauParams {
                            wa: nau.wa.clone(),
                            wb: Tensor::new(vec![8, 16], v.to_vec()).unwrap(),
                        };
                        full_head_scalar(&fm, &params, &q, variant, Some(&mask), &probe)
                    },
                    nau.wb.data(),
                    FD_STEP,
                );
                check(&grads.nau.wb, &num_wb, "wb");
            }
        }
    }

    #[test]
    fn dropout_mask_values_and_determinism() {
        let mask = dropout_mask(1000, 0.7, &mut Rng::new(40)).unwrap();
        let keep = 1.0 / 0.3;
        let mut kept = 0;
        for &v in mask.data() {
            assert!(v == 0.0 || (v - keep).abs() < 1e-15);
            if v != 0.0 {
                kept += 1;
            }
        }
        assert!((200..400).contains(&kept), "kept {kept} of 1000 at p=0.7");
        let again = dropout_mask(1000, 0.7, &mut Rng::new(40)).unwrap();
        assert_eq!(mask, again);

        let none = dropout_mask(10, 0.0, &mut Rng::new(41)).unwrap();
        assert!(none.data().iter().all(|&v| v == 1.0));
        assert!(dropout_mask(10, 1.0, &mut Rng::new(41)).is_err());
    }

    #[test]
    fn pair_enumeration_is_lexicographic_with_self_pairs() {
        let pairs: Vec<_> = unordered_pairs(3).collect();
        assert_eq!(
            pairs,
            vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
        );
        for n in [1usize, 2, 4, 8, 16] {
            assert_eq!(unordered_pairs(n).count(), pair_count(n));
            assert_eq!(pair_count(n), n * (n + 1) / 2);
        }
    }

    #[test]
    fn rm_zero_pair_weights_collapse_to_bias() {
        let fm = rand_map(3, 1, 2, 50);
        let p = pair_count(2);
        let params = RmParams {
            wg: Tensor::zeros(vec![6, 4]),
            w_out: Tensor::normal(vec![p * 4, 5], &mut Rng::new(51), 1.0),
            b_out: Tensor::normal(vec![5], &mut Rng::new(52), 1.0),
        };
        let out = rm_forward(&fm, &params).unwrap();
        assert_eq!(out, params.b_out);
    }

    #[test]
    fn rm_matches_pair_loop_oracle() {
        let fm = rand_map(4, 2, 2, 53);
        let mut rng = Rng::new(54);
        let params = RmParams::init(4, 6, 4, 5, &mut rng);
        let out = rm_forward(&fm, &params).unwrap();

        // independent scalar-loop oracle
        let nodes = nodes_from_feature_map(&fm);
        let (n, c, lr, l) = (4, 4, 6, 5);
        let mut concat = Vec::with_capacity(pair_count(n) * lr);
        for i in 0..n {
            for j in i..n {
                for r in 0..lr {
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += nodes.at2(i, k) * params.wg.at2(k, r);
                        acc += nodes.at2(j, k) * params.wg.at2(c + k, r);
                    }
                    concat.push(acc.max(0.0));
                }
            }
        }
        for t in 0..l {
            let mut acc = params.b_out.data()[t];
            for (p, &v) in concat.iter().enumerate() {
                acc += v * params.w_out.at2(p, t);
            }
            assert!((out.data()[t] - acc).abs() <= 1e-12, "output {t}");
        }
    }
}

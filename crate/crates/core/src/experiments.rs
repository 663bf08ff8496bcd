//! Canned experiment drivers: the embedding-dimension sweep, the 2D toy
//! embedding run with its angular statistics, and the component ablation
//! ladder. Each driver owns its seeding so a single seed reproduces the
//! dataset, the initialization, and the optimization bit for bit.

use crate::eval::{evaluate, EvalError, DEFAULT_FARS};
use crate::losses::MarginConfig;
use crate::model::{HeadDims, LossKind, LossSpec};
use crate::rgm::{EdgeActivation, RgmVariant};
use crate::rng::Rng;
use crate::synth::{gen_dataset, raw_feature_matrix, sample_ids, Dataset, DatasetSpec, Domain};
use crate::tensor::Tensor;
use crate::train::{class_labels, evaluate_model, init_head, train, TrainConfig, TrainError, TrainLog};

/// Splits one experiment seed into unrelated per-purpose seeds, so the
/// dataset stream tree and the training stream tree never share keys.
fn derived_seed(seed: u64, purpose: u64) -> u64 {
    Rng::new(seed).substream(purpose).next_u64()
}

const SEED_DATA: u64 = 0;
const SEED_TRAIN: u64 = 1;

// ---------------------------------------------------------------------------
// embedding-dimension sweep
// ---------------------------------------------------------------------------

/// One sweep point: metrics of a head trained with edge-embedding width
/// `dim`, verification rates at [`DEFAULT_FARS`] order.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub dim: usize,
    pub rank1: f64,
    pub vr: [f64; 3],
}

/// Architecture and optimization shared by every sweep point.
#[derive(Debug, Clone)]
pub struct SweepSetup {
    pub dims: HeadDims,
    pub variant: RgmVariant,
    pub activation: EdgeActivation,
    pub train: TrainConfig,
}

/// Trains a fresh head per requested edge-embedding width on the given
/// dataset, all from the same seed, and reports retrieval metrics. The
/// `embed_dim` field of `setup.dims` is overridden by each sweep value.
pub fn dim_sweep(
    dims: &[usize],
    ds: &Dataset,
    setup: &SweepSetup,
) -> Result<Vec<SweepRow>, TrainError> {
    if dims.is_empty() {
        return Err(TrainError::BadConfig {
            what: "sweep needs at least one dimension".to_string(),
        });
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let head_dims = HeadDims {
            embed_dim: d,
            ..setup.dims.clone()
        };
        let head = init_head(&head_dims, setup.variant, setup.activation, setup.train.seed)?;
        let (trained, _) = train(&head, &ds.train, &setup.train)?;
        let report = evaluate_model(&trained, &ds.gallery, &ds.probe, &DEFAULT_FARS)?;
        rows.push(SweepRow {
            dim: d,
            rank1: report.rank1,
            vr: [
                report.points[0].vr,
                report.points[1].vr,
                report.points[2].vr,
            ],
        });
    }
    Ok(rows)
}

/// CSV table of sweep rows: dimension, rank-1, one verification-rate
/// column per default operating point. Five columns total.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("dim,rank1,vr_at_far_0.01,vr_at_far_0.001,vr_at_far_0.0001\n");
    for r in rows {
        out.push_str(&format!(
            "{},{}\n",
            r.dim,
            crate::io::csv_row(&[r.rank1, r.vr[0], r.vr[1], r.vr[2]])
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// 2D toy embedding
// ---------------------------------------------------------------------------

/// Everything the 2D toy run needs. The output embedding width is forced
/// to 2 regardless of other settings.
#[derive(Debug, Clone)]
pub struct Toy2dSetup {
    pub classes: usize,
    pub per_class_per_domain: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub reduction: usize,
    /// Cross-domain affine strength of the generated data. The toy head
    /// is shallow, so a large constant domain offset dominates its 2D
    /// projection and pins one domain to a single direction; the default
    /// keeps the domain shift visible but within what the head can undo.
    pub domain_gap: f64,
    pub variant: RgmVariant,
    pub activation: EdgeActivation,
    pub train: TrainConfig,
}

impl Default for Toy2dSetup {
    /// Eight identities, two domains, thirty samples per identity per
    /// domain, trained on the full relational head. The margin pair is
    /// gentler than the full-scale default: eight classes on a circle
    /// leave 45 degrees apiece, and a slope/offset demanding more than
    /// that makes the margined term unsatisfiable everywhere, at which
    /// point the loss prefers anti-aligning the whole embedding. The
    /// scale is lowered to match, which keeps the landscape soft enough
    /// for the head to route every class into its own sector.
    fn default() -> Toy2dSetup {
        let mut loss = LossSpec::new(LossKind::CSoftmax);
        loss.margin = MarginConfig {
            m1: 0.9,
            m2: -0.1,
            alpha: 8.0,
            s: 8.0,
        };
        Toy2dSetup {
            classes: 8,
            per_class_per_domain: 30,
            channels: 16,
            height: 4,
            width: 4,
            embed_dim: 8,
            reduction: 2,
            domain_gap: 0.25,
            variant: RgmVariant::RelationalGated,
            activation: EdgeActivation::Sigmoid,
            train: TrainConfig {
                epochs: 200,
                lr: 0.03,
                batch: 64,
                dropout_p: 0.0,
                loss,
                ..TrainConfig::default()
            },
        }
    }
}

/// Angular dispersion summary of labeled 2D unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularStats {
    /// Smallest angular distance between two class mean directions,
    /// radians in [0, pi]. Absent when fewer than two classes exist.
    pub min_inter_class_gap: Option<f64>,
    /// Circular standard deviation sqrt(-2 ln R) per class, averaged over
    /// classes, radians.
    pub mean_intra_class_std: f64,
}

/// Output of one toy run: unit 2D embeddings of every training sample
/// with their labels and domains, plus the angular summary and loss log.
#[derive(Debug, Clone)]
pub struct Toy2dResult {
    /// n x 2, rows normalized to unit length.
    pub coords: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
    pub stats: AngularStats,
    pub log: TrainLog,
}

/// Angular distance between two directions, wrapped into [0, pi].
fn angular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Circular statistics of labeled unit vectors. `coords` must be n x 2
/// with nonzero rows; classes are the distinct label values.
pub fn angular_stats(coords: &Tensor, labels: &[usize]) -> Result<AngularStats, TrainError> {
    if coords.rank() != 2 || coords.cols() != 2 || coords.rows() != labels.len() {
        return Err(TrainError::BadConfig {
            what: format!(
                "angular stats need n x 2 coords matching {} labels, got {:?}",
                labels.len(),
                coords.dims()
            ),
        });
    }
    let classes: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut means = Vec::with_capacity(classes.len());
    let mut stds = Vec::with_capacity(classes.len());
    for &c in &classes {
        let (mut sum_cos, mut sum_sin, mut n) = (0.0, 0.0, 0usize);
        for (i, &l) in labels.iter().enumerate() {
            if l != c {
                continue;
            }
            let (x, y) = (coords.at2(i, 0), coords.at2(i, 1));
            let norm = (x * x + y * y).sqrt();
            if norm == 0.0 {
                return Err(TrainError::Eval(EvalError::Degenerate {
                    what: "toy embedding",
                    index: i,
                }));
            }
            sum_cos += x / norm;
            sum_sin += y / norm;
            n += 1;
        }
        let (c_bar, s_bar) = (sum_cos / n as f64, sum_sin / n as f64);
        let r_bar = (c_bar * c_bar + s_bar * s_bar).sqrt();
        means.push(s_bar.atan2(c_bar));
        // resultant length 0 means no preferred direction: infinite spread
        stds.push(if r_bar > 0.0 {
            (-2.0 * r_bar.ln()).sqrt()
        } else {
            f64::INFINITY
        });
    }

    let min_gap = if means.len() < 2 {
        None
    } else {
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                best = best.min(angular_distance(means[i], means[j]));
            }
        }
        Some(best)
    };
    Ok(AngularStats {
        min_inter_class_gap: min_gap,
        mean_intra_class_std: stds.iter().sum::<f64>() / stds.len() as f64,
    })
}

/// Generates the toy dataset, trains a 2-dimensional head, and reports
/// every training sample's unit embedding with the angular summary.
pub fn toy2d(setup: &Toy2dSetup, seed: u64) -> Result<Toy2dResult, TrainError> {
    let spec = DatasetSpec {
        n_train_ids: setup.classes,
        n_test_ids: 1,
        per_id_per_domain: setup.per_class_per_domain,
        channels: setup.channels,
        height: setup.height,
        width: setup.width,
        domain_gap: setup.domain_gap,
        ..DatasetSpec::default()
    };
    let ds = gen_dataset(&spec, derived_seed(seed, SEED_DATA)).map_err(|e| {
        TrainError::BadConfig {
            what: format!("toy dataset: {e}"),
        }
    })?;

    let dims = HeadDims {
        channels: setup.channels,
        height: setup.height,
        width: setup.width,
        embed_dim: setup.embed_dim,
        out_dim: 2,
        classes: setup.classes,
        reduction: setup.reduction,
    };
    let cfg = TrainConfig {
        seed: derived_seed(seed, SEED_TRAIN),
        freeze_classifier: true,
        ..setup.train.clone()
    };
    let mut head = init_head(&dims, setup.variant, setup.activation, cfg.seed)?;
    // pin the class directions evenly on the circle and train only the
    // head: trainable 2D prototypes fuse into fewer directions and the
    // fused classes then receive identical gradients forever, while with
    // fixed zero-sum anchors the rival terms cancel and every class flows
    // to its own sector under either loss
    let mut anchors = vec![0.0; 2 * setup.classes];
    for j in 0..setup.classes {
        let phi = std::f64::consts::TAU * j as f64 / setup.classes as f64;
        anchors[j] = phi.cos();
        anchors[setup.classes + j] = phi.sin();
    }
    head.w_cls = Tensor::matrix(2, setup.classes, anchors)?;
    let (trained, log) = train(&head, &ds.train, &cfg)?;

    let emb = crate::train::embed_parallel(&trained, &ds.train, crate::train::thread_cap())?;
    let mut coords = Vec::with_capacity(emb.rows() * 2);
    for i in 0..emb.rows() {
        let (x, y) = (emb.at2(i, 0), emb.at2(i, 1));
        let norm = (x * x + y * y).sqrt();
        if norm == 0.0 {
            return Err(TrainError::Eval(EvalError::Degenerate {
                what: "toy embedding",
                index: i,
            }));
        }
        coords.push(x / norm);
        coords.push(y / norm);
    }
    let coords = Tensor::matrix(emb.rows(), 2, coords)?;
    let (labels, _) = class_labels(&ds.train);
    let domains: Vec<Domain> = ds.train.iter().map(|s| s.domain).collect();
    let stats = angular_stats(&coords, &labels)?;
    Ok(Toy2dResult {
        coords,
        labels,
        domains,
        stats,
        log,
    })
}

/// CSV table of the toy run: one row per sample with its class, domain,
/// and unit-circle position.
pub fn toy2d_csv(res: &Toy2dResult) -> String {
    let mut out = String::from("label,domain,x,y\n");
    for i in 0..res.labels.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            res.labels[i],
            res.domains[i],
            crate::io::csv_row(&[res.coords.at2(i, 0), res.coords.at2(i, 1)])
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// component ablation
// ---------------------------------------------------------------------------

/// One ablation configuration's retrieval metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub rank1: f64,
    pub vr: [f64; 3],
}

/// Architecture template and optimization for the trained ablation rows.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub embed_dim: usize,
    pub out_dim: usize,
    pub reduction: usize,
    pub activation: EdgeActivation,
    pub train: TrainConfig,
}

impl Default for AblationSetup {
    /// Tuned for the default synthetic database: gentle rate with the
    /// halfway decay late enough for every ladder row to organize, and
    /// no dropout, whose inverted rescale is large next to the raw
    /// feature spread and stalls the small heads here.
    fn default() -> AblationSetup {
        AblationSetup {
            embed_dim: 8,
            out_dim: 16,
            reduction: 2,
            activation: EdgeActivation::Sigmoid,
            train: TrainConfig {
                epochs: 150,
                lr: 0.001,
                batch: 64,
                dropout_p: 0.0,
                ..TrainConfig::default()
            },
        }
    }
}

/// The component ladder on one dataset:
///
/// 1. `baseline`: raw frozen features matched by cosine, no training;
/// 2. `linear-ce`: linear head trained with cross entropy over scaled
///    cosine logits;
/// 3. `relational-ce`: edge propagation added, same loss;
/// 4. `full`: propagation, node gating, and the conditional-margin loss.
///
/// The cross-entropy rows score against normalized class directions:
/// the generator's domain shift leaves raw feature magnitudes large,
/// and unnormalized logits feed their own growth back through the
/// classifier until the loss overflows. Cosine logits are bounded, so
/// the rows differ from `full` only in architecture and margin.
///
/// All trained rows share the seed, the optimizer settings, and the
/// template dimensions.
pub fn ablation(ds: &Dataset, setup: &AblationSetup) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(4);

    let gallery_raw = raw_feature_matrix(&ds.gallery).map_err(|e| TrainError::BadConfig {
        what: format!("gallery features: {e}"),
    })?;
    let probe_raw = raw_feature_matrix(&ds.probe).map_err(|e| TrainError::BadConfig {
        what: format!("probe features: {e}"),
    })?;
    let report = evaluate(
        &probe_raw,
        &sample_ids(&ds.probe),
        &gallery_raw,
        &sample_ids(&ds.gallery),
        &DEFAULT_FARS,
    )?;
    rows.push(AblationRow {
        name: "baseline",
        rank1: report.rank1,
        vr: [
            report.points[0].vr,
            report.points[1].vr,
            report.points[2].vr,
        ],
    });

    let first = ds.train.first().ok_or(TrainError::EmptyDataset)?;
    let dims = HeadDims {
        channels: first.features.channels(),
        height: first.features.height(),
        width: first.features.width(),
        embed_dim: setup.embed_dim,
        out_dim: setup.out_dim,
        classes: ds.num_classes(),
        reduction: setup.reduction,
    };
    let ladder: [(&'static str, RgmVariant, LossKind); 3] = [
        ("linear-ce", RgmVariant::Linear, LossKind::NSoftmax),
        ("relational-ce", RgmVariant::Relational, LossKind::NSoftmax),
        ("full", RgmVariant::RelationalGated, LossKind::CSoftmax),
    ];
    for (name, variant, loss) in ladder {
        let cfg = TrainConfig {
            loss: LossSpec::new(loss),
            ..setup.train.clone()
        };
        let head = init_head(&dims, variant, setup.activation, cfg.seed)?;
        let (trained, _) = train(&head, &ds.train, &cfg)?;
        let report = evaluate_model(&trained, &ds.gallery, &ds.probe, &DEFAULT_FARS)?;
        rows.push(AblationRow {
            name,
            rank1: report.rank1,
            vr: [
                report.points[0].vr,
                report.points[1].vr,
                report.points[2].vr,
            ],
        });
    }
    Ok(rows)
}

//! SGD training over frozen synthetic features and the retrieval
//! evaluation wrapper.
//!
//! The loop is deterministic end to end: the config seed derives one
//! substream per epoch for the shuffle and one for the dropout masks, so
//! a rerun reproduces every batch, every mask, and every update bit for
//! bit. Evaluation may embed samples on several threads (capped by the
//! `RELGRAPH_THREADS` environment variable) because each embedding is a
//! pure function of the parameters; results are written by sample index
//! and do not depend on the thread count.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{
    batch_dropout_masks, embed_batch, loss_and_grads, HeadGrads, HeadParams, LossKind, LossSpec,
    ModelError,
};
use crate::rgm::FeatureMap;
use crate::rng::Rng;
use crate::synth::Sample;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("config: {what}")]
    BadConfig { what: String },
    #[error("loss became non-finite ({value}) at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        value: f64,
    },
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub dropout_p: f64,
    pub weight_decay: f64,
    pub loss: LossSpec,
    pub seed: u64,
    /// Keep the classifier weights and bias at their initial values and
    /// train only the head. Low-dimensional embedding runs use this with
    /// preset class directions; trainable 2D prototypes tend to fuse,
    /// and fused classes receive identical gradients forever after.
    pub freeze_classifier: bool,
}

impl Default for TrainConfig {
    /// Small-database defaults: batch 64, lr 0.001, momentum 0.9,
    /// dropout 0.7, no weight decay, 100 epochs.
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.001,
            batch: 64,
            momentum: 0.9,
            epochs: 100,
            dropout_p: 0.7,
            weight_decay: 0.0,
            loss: LossSpec::new(LossKind::CSoftmax),
            seed: 0,
            freeze_classifier: false,
        }
    }
}

impl TrainConfig {
    /// Step-decay milestones: the learning rate is divided by 10 on
    /// entering epochs floor(E/2) and floor(3E/4).
    pub fn milestones(&self) -> [usize; 2] {
        [self.epochs / 2, 3 * self.epochs / 4]
    }

    /// Learning rate in effect at a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr * 0.1f64.powi(passed as i32)
    }

    /// Rejects configs the CLI should never run. The loop itself stays
    /// total on degenerate values (lr 0 trains to an unchanged model),
    /// which keeps its edge cases testable.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::BadConfig {
                what: format!("lr must be positive and finite, got {}", self.lr),
            });
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TrainError::BadConfig {
                what: format!("dropout_p must lie in [0, 1), got {}", self.dropout_p),
            });
        }
        if self.batch == 0 {
            return Err(TrainError::BadConfig {
                what: "batch must be at least 1".to_string(),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig {
                what: format!("momentum must lie in [0, 1), got {}", self.momentum),
            });
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(TrainError::BadConfig {
                what: format!("weight_decay must be nonnegative, got {}", self.weight_decay),
            });
        }
        Ok(())
    }
}

/// One parameter tensor's momentum update:
/// v' = momentum * v + g, p' = p - lr * v'. Returns (p', v').
pub fn sgd_momentum_step(
    param: &Tensor,
    grad: &Tensor,
    velocity: &Tensor,
    lr: f64,
    momentum: f64,
) -> Result<(Tensor, Tensor), ShapeError> {
    if param.dims() != grad.dims() || param.dims() != velocity.dims() {
        return Err(ShapeError::Mismatch {
            op: "sgd_momentum_step",
            left: param.dims().to_vec(),
            right: grad.dims().to_vec(),
        });
    }
    let v: Vec<f64> = velocity
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| momentum * v + g)
        .collect();
    let p: Vec<f64> = param
        .data()
        .iter()
        .zip(&v)
        .map(|(&p, &v)| p - lr * v)
        .collect();
    Ok((
        Tensor::new(param.dims().to_vec(), p)?,
        Tensor::new(param.dims().to_vec(), v)?,
    ))
}

/// Maps the distinct identities of a sample set onto contiguous class
/// labels in ascending id order. Returns per-sample labels plus the map.
pub fn class_labels(samples: &[Sample]) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let ids: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.id).collect();
    let map: BTreeMap<usize, usize> = ids.into_iter().zip(0..).collect();
    let labels = samples.iter().map(|s| map[&s.id]).collect();
    (labels, map)
}

/// Per-epoch training summary. `mean_loss` averages the per-batch loss
/// values of the epoch; batches skipped for lack of a triplet are
/// excluded from the mean and counted separately.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    pub skipped: usize,
}

/// Full log of one run.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

// substream layout under the config seed
const STREAM_SHUFFLE: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_INIT: u64 = 2;

/// Initializes a head from the same seed namespace the trainer uses, so
/// one config seed pins initialization, shuffling, and dropout together.
pub fn init_head(
    dims: &crate::model::HeadDims,
    variant: crate::rgm::RgmVariant,
    activation: crate::rgm::EdgeActivation,
    seed: u64,
) -> Result<HeadParams, ModelError> {
    let root = Rng::new(seed);
    HeadParams::init(dims, variant, activation, &mut root.substream(STREAM_INIT))
}

/// Trains a head on labeled samples. Labels are derived from sample
/// identities in ascending id order; for classifier losses their count
/// must equal the head's class dimension.
///
/// Each epoch shuffles the sample order and walks it in `cfg.batch`
/// chunks (the trailing partial chunk included). Weight decay folds into
/// the gradient before the momentum update. Ranking batches without a
/// valid triplet are skipped rather than failed: they carry no signal.
pub fn train(
    params: &HeadParams,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<(HeadParams, TrainLog), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(TrainError::BadConfig {
            what: "batch must be at least 1".to_string(),
        });
    }
    let (labels, map) = class_labels(samples);
    if cfg.loss.kind != LossKind::TripletCond && map.len() != params.dims.classes {
        return Err(TrainError::BadConfig {
            what: format!(
                "head has {} classes but the training set holds {} identities",
                params.dims.classes,
                map.len()
            ),
        });
    }

    let root = Rng::new(cfg.seed);
    let shuffle_root = root.substream(STREAM_SHUFFLE);
    let dropout_root = root.substream(STREAM_DROPOUT);
    let mask_len = params.dims.nodes() * params.dims.channels;

    let mut current = params.clone();
    let mut velocity = HeadGrads::zeros_like(params);
    let mut log = TrainLog { epochs: Vec::new() };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        shuffle_root.substream(epoch as u64).shuffle(&mut order);
        let mut dropout_rng = dropout_root.substream(epoch as u64);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut skipped = 0usize;

        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let maps: Vec<&FeatureMap> = chunk.iter().map(|&i| &samples[i].features).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let masks =
                batch_dropout_masks(chunk.len(), mask_len, cfg.dropout_p, &mut dropout_rng)?;

            let (value, grads) =
                match loss_and_grads(&current, &maps, &batch_labels, &cfg.loss, Some(&masks)) {
                    Ok(r) => r,
                    Err(ModelError::NoTriplets) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    value,
                });
            }

            for ((name, p), ((_, g), (_, v))) in current
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors().into_iter().zip(velocity.tensors_mut()))
            {
                if cfg.freeze_classifier && (name == "w_cls" || name == "b_cls") {
                    continue;
                }
                let g_eff = if cfg.weight_decay != 0.0 {
                    let decayed: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(p.data())
                        .map(|(&g, &pv)| g + cfg.weight_decay * pv)
                        .collect();
                    Tensor::new(g.dims().to_vec(), decayed)?
                } else {
                    g.clone()
                };
                let (np, nv) = sgd_momentum_step(p, &g_eff, v, lr, cfg.momentum)?;
                *p = np;
                *v = nv;
            }
            loss_sum += value;
            batches += 1;
        }

        log.epochs.push(EpochStats {
            epoch,
            lr,
            mean_loss: if batches > 0 {
                loss_sum / batches as f64
            } else {
                f64::NAN
            },
            batches,
            skipped,
        });
    }

    Ok((current, log))
}

// ---------------------------------------------------------------------------
// evaluation wrapper
// ---------------------------------------------------------------------------

/// Parallelism cap: the `RELGRAPH_THREADS` environment variable when it
/// parses to a positive count, otherwise the machine's available
/// parallelism, and never more than the sample count at the call site.
pub fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("RELGRAPH_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Embeds samples without dropout, fanning contiguous sample ranges out
/// over up to `threads` workers. The output is identical to the
/// sequential path for every thread count because each row is a pure
/// function of (params, sample).
pub fn embed_parallel(
    params: &HeadParams,
    samples: &[Sample],
    threads: usize,
) -> Result<Tensor, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let workers = threads.clamp(1, samples.len());
    if workers == 1 {
        let maps: Vec<&FeatureMap> = samples.iter().map(|s| &s.features).collect();
        return embed_batch(params, &maps, None).map(|(e, _)| e);
    }

    let chunk = samples.len().div_ceil(workers);
    let mut results: Vec<Result<Tensor, ModelError>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for piece in samples.chunks(chunk) {
            handles.push(scope.spawn(move || {
                let maps: Vec<&FeatureMap> = piece.iter().map(|s| &s.features).collect();
                embed_batch(params, &maps, None).map(|(e, _)| e)
            }));
        }
        for h in handles {
            results.push(h.join().expect("embedding worker panicked"));
        }
    });

    let l = params.dims.out_dim;
    let mut data = Vec::with_capacity(samples.len() * l);
    for r in results {
        data.extend_from_slice(r?.data());
    }
    Ok(Tensor::matrix(samples.len(), l, data)?)
}

/// Embeds gallery and probe sets and scores retrieval at the requested
/// false-accept budgets.
pub fn evaluate_model(
    params: &HeadParams,
    gallery: &[Sample],
    probe: &[Sample],
    fars: &[f64],
) -> Result<EvalReport, TrainError> {
    let threads = thread_cap();
    let gallery_emb = embed_parallel(params, gallery, threads)?;
    let probe_emb = embed_parallel(params, probe, threads)?;
    let gallery_ids: Vec<usize> = gallery.iter().map(|s| s.id).collect();
    let probe_ids: Vec<usize> = probe.iter().map(|s| s.id).collect();
    Ok(evaluate(
        &probe_emb,
        &probe_ids,
        &gallery_emb,
        &gallery_ids,
        fars,
    )?)
}

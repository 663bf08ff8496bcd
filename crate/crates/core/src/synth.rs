//! Synthetic two-domain identity benchmark.
//!
//! Each identity is a pair (parts, structure): random part vectors plus a
//! row-stochastic mixing matrix that encodes how the parts relate. A sample
//! renders the mixed parts `structure * parts` into a feature map and then
//! pushes them through a per-channel affine map that belongs to the imaging
//! domain, plus iid noise. The visible domain is the identity map; the
//! "near-infrared" domain draws random per-channel gains and biases whose
//! spread is the `domain_gap` knob.
//!
//! The construction pins down what a cross-domain matcher must learn: the
//! mixing structure survives the domain change untouched (it acts across
//! nodes, the affine acts across channels), while raw channel statistics
//! are deliberately scrambled. With a large gap, nearest-neighbor matching
//! on raw features fails across domains but remains near-perfect within a
//! domain, so the gap is real yet closable.
//!
//! Everything is a pure function of the seed via counter-based substreams:
//! identity k always draws from the same stream no matter how many samples
//! were generated before it.

use thiserror::Error;

use crate::rgm::{feature_map_from_nodes, FeatureMap};
use crate::rng::Rng;
use crate::tensor::{matmul, row_softmax, scale, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{what} must be at least 1")]
    EmptyConfig { what: &'static str },
    #[error("samples must share one feature shape, found {left:?} and {right:?}")]
    MixedShapes { left: Vec<usize>, right: Vec<usize> },
}

/// Imaging domain of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Vis,
    Nir,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Vis => "vis",
            Domain::Nir => "nir",
        })
    }
}

/// One synthetic identity: what its parts look like and how they mix.
#[derive(Debug, Clone)]
pub struct IdentitySpec {
    pub id: usize,
    /// N x C base part vectors.
    pub parts: Tensor,
    /// N x N row-stochastic mixing matrix; the identity's relational
    /// signature, shared by every sample of the identity in every domain.
    pub structure: Tensor,
}

/// Per-channel affine perturbation plus noise level of one domain.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub name: Domain,
    /// Per-channel multiplicative gain, always positive.
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise_sigma: f64,
}

impl DomainSpec {
    /// The identity transform: the visible domain renders features as-is.
    pub fn vis(channels: usize, noise_sigma: f64) -> DomainSpec {
        DomainSpec {
            name: Domain::Vis,
            gain: vec![1.0; channels],
            bias: vec![0.0; channels],
            noise_sigma,
        }
    }

    /// Draws a perturbed domain: log-normal gains and normal biases, both
    /// spread by `gap`. Gains stay positive by construction, so every
    /// channel remains linearly recoverable; the bias spread is deliberately
    /// the larger of the two, because positive gains alone leave raw
    /// cross-domain cosines nearly intact (within-channel node patterns
    /// keep their sign), while dominant per-channel offsets drag every
    /// sample of the domain toward one constant direction and break
    /// nearest-neighbor matching against the unperturbed domain.
    pub fn nir(channels: usize, gap: f64, noise_sigma: f64, rng: &mut Rng) -> DomainSpec {
        const GAIN_SPREAD: f64 = 0.125;
        const BIAS_SPREAD: f64 = 4.0;
        let gain = (0..channels)
            .map(|_| (GAIN_SPREAD * gap * rng.normal()).exp())
            .collect();
        let bias = (0..channels)
            .map(|_| BIAS_SPREAD * gap * rng.normal())
            .collect();
        DomainSpec {
            name: Domain::Nir,
            gain,
            bias,
            noise_sigma,
        }
    }
}

/// One rendered observation of an identity in a domain.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub domain: Domain,
    pub features: FeatureMap,
}

/// Draws a fresh identity: standard-normal parts and a sharpness-peaked
/// row-stochastic structure. Sharpness 0 mixes every part uniformly; large
/// sharpness concentrates each row on one part. The caller assigns `id`.
pub fn gen_identity(
    rng: &mut Rng,
    nodes: usize,
    channels: usize,
    structure_sharpness: f64,
) -> Result<IdentitySpec, SynthError> {
    if nodes == 0 {
        return Err(SynthError::EmptyConfig { what: "nodes" });
    }
    if channels == 0 {
        return Err(SynthError::EmptyConfig { what: "channels" });
    }
    let parts = Tensor::normal(vec![nodes, channels], rng, 1.0);
    let raw = Tensor::normal(vec![nodes, nodes], rng, 1.0);
    let structure = row_softmax(&scale(&raw, structure_sharpness))?;
    Ok(IdentitySpec {
        id: 0,
        parts,
        structure,
    })
}

/// Renders one sample: mixes the parts by the identity's structure, applies
/// the domain's per-channel affine, adds noise, and lays the nodes out on
/// an `height` x `width` grid (so `height * width` must equal the node
/// count).
pub fn gen_sample(
    spec: &IdentitySpec,
    dom: &DomainSpec,
    rng: &mut Rng,
    height: usize,
    width: usize,
) -> Result<Sample, SynthError> {
    let mixed = matmul(&spec.structure, &spec.parts)?;
    let (n, c) = (mixed.rows(), mixed.cols());
    if dom.gain.len() != c || dom.bias.len() != c {
        return Err(SynthError::MixedShapes {
            left: vec![c],
            right: vec![dom.gain.len()],
        });
    }
    let mut nodes = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            nodes[i * c + ch] =
                dom.gain[ch] * mixed.at2(i, ch) + dom.bias[ch] + dom.noise_sigma * rng.normal();
        }
    }
    let features = feature_map_from_nodes(&Tensor::matrix(n, c, nodes)?, height, width)?;
    Ok(Sample {
        id: spec.id,
        domain: dom.name,
        features,
    })
}

/// Shape and generation knobs of a dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub n_train_ids: usize,
    pub n_test_ids: usize,
    /// Samples per identity per domain in the training split, and the
    /// number of probe samples per test identity.
    pub per_id_per_domain: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// How far the perturbed domain's channel statistics stray from the
    /// identity transform.
    pub domain_gap: f64,
    pub noise_sigma: f64,
    pub structure_sharpness: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_train_ids: 40,
            n_test_ids: 20,
            per_id_per_domain: 5,
            channels: 16,
            height: 4,
            width: 4,
            domain_gap: 2.0,
            noise_sigma: 0.05,
            structure_sharpness: 4.0,
        }
    }
}

impl DatasetSpec {
    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for (value, what) in [
            (self.n_train_ids, "n_train_ids"),
            (self.n_test_ids, "n_test_ids"),
            (self.per_id_per_domain, "per_id_per_domain"),
            (self.channels, "channels"),
            (self.height, "height"),
            (self.width, "width"),
        ] {
            if value == 0 {
                return Err(SynthError::EmptyConfig { what });
            }
        }
        Ok(())
    }
}

/// A generated benchmark: training samples from both domains plus the
/// cross-domain evaluation split (visible gallery, perturbed-domain
/// probes) over held-out identities.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub gallery: Vec<Sample>,
    pub probe: Vec<Sample>,
}

impl Dataset {
    /// Number of classification targets: the training identities, labeled
    /// by their id (train ids are assigned 0..n_train_ids).
    pub fn num_classes(&self) -> usize {
        self.spec.n_train_ids
    }
}

// substream indices under the root seed
const STREAM_DOMAIN: u64 = 0;
const STREAM_ID_BASE: u64 = 1;
// substream indices under one identity's stream
const STREAM_IDENTITY: u64 = 0;
const STREAM_SAMPLE_BASE: u64 = 1;

/// Generates the full benchmark from a seed. Train identities get ids
/// 0..n_train_ids with `per_id_per_domain` samples in each domain; test
/// identities continue the id range and contribute one visible gallery
/// sample plus `per_id_per_domain` perturbed-domain probes each.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let root = Rng::new(seed);
    let vis = DomainSpec::vis(spec.channels, spec.noise_sigma);
    let nir = DomainSpec::nir(
        spec.channels,
        spec.domain_gap,
        spec.noise_sigma,
        &mut root.substream(STREAM_DOMAIN),
    );

    let per = spec.per_id_per_domain;
    let draw = |id: usize, domain_idx: u64, k: usize| -> Result<Sample, SynthError> {
        let id_rng = root.substream(STREAM_ID_BASE + id as u64);
        let mut identity = gen_identity(
            &mut id_rng.substream(STREAM_IDENTITY),
            spec.nodes(),
            spec.channels,
            spec.structure_sharpness,
        )?;
        identity.id = id;
        let dom = if domain_idx == 0 { &vis } else { &nir };
        let mut sample_rng =
            id_rng.substream(STREAM_SAMPLE_BASE + domain_idx * per as u64 + k as u64);
        gen_sample(&identity, dom, &mut sample_rng, spec.height, spec.width)
    };

    let mut train = Vec::with_capacity(spec.n_train_ids * per * 2);
    for id in 0..spec.n_train_ids {
        for domain_idx in 0..2u64 {
            for k in 0..per {
                train.push(draw(id, domain_idx, k)?);
            }
        }
    }

    let mut gallery = Vec::with_capacity(spec.n_test_ids);
    let mut probe = Vec::with_capacity(spec.n_test_ids * per);
    for j in 0..spec.n_test_ids {
        let id = spec.n_train_ids + j;
        gallery.push(draw(id, 0, 0)?);
        for k in 0..per {
            probe.push(draw(id, 1, k)?);
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        gallery,
        probe,
    })
}

/// Stacks flattened sample features into an n x (C*H*W) matrix, the raw
/// representation nearest-neighbor baselines match on.
pub fn raw_feature_matrix(samples: &[Sample]) -> Result<Tensor, SynthError> {
    let first = match samples.first() {
        Some(s) => s.features.tensor().dims().to_vec(),
        None => return Err(SynthError::EmptyConfig { what: "samples" }),
    };
    let len: usize = first.iter().product();
    let mut data = Vec::with_capacity(samples.len() * len);
    for s in samples {
        if s.features.tensor().dims() != first {
            return Err(SynthError::MixedShapes {
                left: first,
                right: s.features.tensor().dims().to_vec(),
            });
        }
        data.extend_from_slice(s.features.tensor().data());
    }
    Ok(Tensor::matrix(samples.len(), len, data)?)
}

/// Identity labels of a sample slice, in order.
pub fn sample_ids(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.id).collect()
}

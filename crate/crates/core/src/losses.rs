//! Classification and ranking losses over embedding/classifier cosines.
//!
//! All angular losses share one front end: [`cosine_logits`] normalizes the
//! embedding rows and the classifier columns and takes their inner products,
//! so entry (i, j) is the cosine between sample i and class j. The losses
//! differ only in how the *target* cosine is re-mapped before the usual
//! cross entropy:
//!
//! * [`normalized_softmax`]: target untouched, every logit scaled by `s`.
//! * [`c_softmax`]: target logit replaced by `alpha * (m1*cos + m2)`.
//!   Because the decision boundary `cos_j = m1*cos_t + m2` is affine in the
//!   target cosine, the enforced margin grows where classes are similar and
//!   relaxes where they are already far apart.
//! * [`cosface`]: additive cosine margin, `s * (cos_t - m)`; exactly
//!   `c_softmax` with slope 1 and intercept -m.
//! * [`arcface`]: additive angular margin, `s * cos(theta_t + m)`.
//! * [`softmax_ce`]: plain cross entropy over unnormalized logits, the only
//!   loss here that keeps a classifier bias.
//!
//! [`triplet_conditional`] is the ranking form of the same idea: the hinge
//! compares shifted similarity ratios instead of differences, so tight
//! positive pairs tolerate less negative-pair similarity.
//!
//! Every result carries analytic gradients with respect to the cosine (or
//! logit) matrix; [`cosine_logits_vjp`] pushes them back through the
//! normalizations onto embeddings and classifier weights.

use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{what} {index} has zero norm; cosine is undefined")]
    DegenerateInput { what: &'static str, index: usize },
    #[error("margin slope/intercept must satisfy m1 - m2 >= 1, got m1={m1} m2={m2}")]
    InvalidMargin { m1: f64, m2: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("expected {expected} labels for batch, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("margin map needs resolution >= 2, got {got}")]
    Resolution { got: usize },
}

/// Margin parameters of the conditional-margin softmax. `alpha` scales the
/// re-mapped target logit, `s` the plain logits; the published setting uses
/// `alpha = s`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginConfig {
    pub m1: f64,
    pub m2: f64,
    pub alpha: f64,
    pub s: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            m1: 0.7,
            m2: -0.3,
            alpha: 24.0,
            s: 24.0,
        }
    }
}

impl MarginConfig {
    /// The boundary `cos_j < m1*cos_t + m2` only separates (the margined
    /// target stays below the identity line on [-1, 1]) when m1 - m2 >= 1.
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.m1 - self.m2 >= 1.0) || !self.m1.is_finite() || !self.m2.is_finite() {
            return Err(LossError::InvalidMargin {
                m1: self.m1,
                m2: self.m2,
            });
        }
        Ok(())
    }
}

/// Loss value and its gradient with respect to the cosine (or logit) matrix
/// the loss was evaluated on.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub d_cos: Tensor,
}

// ---------------------------------------------------------------------------
// cosine front end
// ---------------------------------------------------------------------------

/// Normalized embeddings, normalized classifier, and their cosines.
#[derive(Debug, Clone)]
pub struct CosineLogits {
    cos: Tensor,    // B x M
    x_unit: Tensor, // B x L
    w_unit: Tensor, // L x M
    x_norms: Vec<f64>,
    w_norms: Vec<f64>,
}

impl CosineLogits {
    /// Cosine matrix, entry (i, j) in [-1, 1].
    pub fn cos(&self) -> &Tensor {
        &self.cos
    }

    pub fn batch(&self) -> usize {
        self.cos.rows()
    }

    pub fn classes(&self) -> usize {
        self.cos.cols()
    }
}

/// Row-normalizes `x` (B x L), column-normalizes `w` (L x M), and returns
/// every pairwise cosine. A zero-norm row or column is rejected: its
/// direction, and therefore its cosine, does not exist.
pub fn cosine_logits(x: &Tensor, w: &Tensor) -> Result<CosineLogits, LossError> {
    if x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() {
        return Err(ShapeError::Mismatch {
            op: "cosine_logits",
            left: x.dims().to_vec(),
            right: w.dims().to_vec(),
        }
        .into());
    }
    let (b, l) = (x.rows(), x.cols());
    let m = w.cols();

    let mut x_norms = vec![0.0; b];
    let mut x_unit = vec![0.0; b * l];
    for i in 0..b {
        let row = x.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LossError::DegenerateInput {
                what: "embedding row",
                index: i,
            });
        }
        x_norms[i] = norm;
        for k in 0..l {
            x_unit[i * l + k] = row[k] / norm;
        }
    }

    let mut w_norms = vec![0.0; m];
    let mut w_unit = vec![0.0; l * m];
    for j in 0..m {
        let norm = (0..l).map(|k| w.at2(k, j) * w.at2(k, j)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(LossError::DegenerateInput {
                what: "classifier column",
                index: j,
            });
        }
        w_norms[j] = norm;
        for k in 0..l {
            w_unit[k * m + j] = w.at2(k, j) / norm;
        }
    }

    let mut cos = vec![0.0; b * m];
    for i in 0..b {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..l {
                acc += x_unit[i * l + k] * w_unit[k * m + j];
            }
            cos[i * m + j] = acc;
        }
    }

    Ok(CosineLogits {
        cos: Tensor::matrix(b, m, cos)?,
        x_unit: Tensor::matrix(b, l, x_unit)?,
        w_unit: Tensor::matrix(l, m, w_unit)?,
        x_norms,
        w_norms,
    })
}

/// Pushes a cosine cotangent back onto the raw embeddings and classifier.
/// For v' = v/|v| the pullback of d is (d - <d, v'> v') / |v|.
pub fn cosine_logits_vjp(
    cl: &CosineLogits,
    d_cos: &Tensor,
) -> Result<(Tensor, Tensor), LossError> {
    let (b, m) = (cl.batch(), cl.classes());
    let l = cl.x_unit.cols();
    if d_cos.dims() != [b, m] {
        return Err(ShapeError::Mismatch {
            op: "cosine_logits_vjp",
            left: vec![b, m],
            right: d_cos.dims().to_vec(),
        }
        .into());
    }

    let mut d_x = vec![0.0; b * l];
    for i in 0..b {
        let xu = cl.x_unit.row(i);
        // d(x_unit_i) = sum_j d_cos[i,j] * w_unit[:,j]
        let mut du = vec![0.0; l];
        for j in 0..m {
            let g = d_cos.at2(i, j);
            if g == 0.0 {
                continue;
            }
            for k in 0..l {
                du[k] += g * cl.w_unit.at2(k, j);
            }
        }
        let dot: f64 = du.iter().zip(xu).map(|(a, b)| a * b).sum();
        for k in 0..l {
            d_x[i * l + k] = (du[k] - dot * xu[k]) / cl.x_norms[i];
        }
    }

    let mut d_w = vec![0.0; l * m];
    for j in 0..m {
        // d(w_unit_j) = sum_i d_cos[i,j] * x_unit_i
        let mut du = vec![0.0; l];
        for i in 0..b {
            let g = d_cos.at2(i, j);
            if g == 0.0 {
                continue;
            }
            let xu = cl.x_unit.row(i);
            for k in 0..l {
                du[k] += g * xu[k];
            }
        }
        let dot: f64 = (0..l).map(|k| du[k] * cl.w_unit.at2(k, j)).sum();
        for k in 0..l {
            d_w[k * m + j] = (du[k] - dot * cl.w_unit.at2(k, j)) / cl.w_norms[j];
        }
    }

    Ok((Tensor::matrix(b, l, d_x)?, Tensor::matrix(l, m, d_w)?))
}

// ---------------------------------------------------------------------------
// cross entropy family
// ---------------------------------------------------------------------------

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<(), LossError> {
    if labels.len() != batch {
        return Err(LossError::LabelCount {
            expected: batch,
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&t| t >= classes) {
        return Err(LossError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Per-sample cross-entropy losses of unnormalized logits.
pub fn softmax_ce_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>, LossError> {
    let (b, m) = (logits.rows(), logits.cols());
    check_labels(b, m, labels)?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = logits.row(i);
        let hi = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = hi + row.iter().map(|&v| (v - hi).exp()).sum::<f64>().ln();
        out.push(lse - row[labels[i]]);
    }
    Ok(out)
}

/// Mean cross entropy over the batch; gradient is (softmax - onehot) / B.
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<LossResult, LossError> {
    let (b, m) = (logits.rows(), logits.cols());
    let per_sample = softmax_ce_per_sample(logits, labels)?;
    let value = per_sample.iter().sum::<f64>() / b as f64;

    let mut grad = vec![0.0; b * m];
    for i in 0..b {
        let row = logits.row(i);
        let hi = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let total: f64 = row.iter().map(|&v| (v - hi).exp()).sum();
        for j in 0..m {
            let p = (row[j] - hi).exp() / total;
            grad[i * m + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(LossResult {
        value,
        d_cos: Tensor::matrix(b, m, grad)?,
    })
}

/// Per-sample losses of the scale-only angular softmax.
pub fn normalized_softmax_per_sample(
    cl: &CosineLogits,
    labels: &[usize],
    s: f64,
) -> Result<Vec<f64>, LossError> {
    softmax_ce_per_sample(&crate::tensor::scale(cl.cos(), s), labels)
}

/// Cross entropy over `s * cos`, no margin, no bias.
pub fn normalized_softmax(
    cl: &CosineLogits,
    labels: &[usize],
    s: f64,
) -> Result<LossResult, LossError> {
    let scaled = crate::tensor::scale(cl.cos(), s);
    let base = softmax_ce(&scaled, labels)?;
    Ok(LossResult {
        value: base.value,
        d_cos: crate::tensor::scale(&base.d_cos, s),
    })
}

/// Per-sample conditional-margin softmax losses, computed directly from the
/// defining ratio with max-shifted exponentials:
///
/// loss_i = -log( e^{alpha(m1 c_t + m2)} /
///                (sum_{j != t} e^{s c_j} + e^{alpha(m1 c_t + m2)}) )
pub fn c_softmax_per_sample(
    cl: &CosineLogits,
    labels: &[usize],
    mc: &MarginConfig,
) -> Result<Vec<f64>, LossError> {
    mc.validate()?;
    let (b, m) = (cl.batch(), cl.classes());
    check_labels(b, m, labels)?;
    let cos = cl.cos();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = cos.row(i);
        let t = labels[i];
        let a_t = mc.alpha * (mc.m1 * row[t] + mc.m2);
        let mut hi = a_t;
        for (j, &c) in row.iter().enumerate() {
            if j != t {
                hi = hi.max(mc.s * c);
            }
        }
        let num = (a_t - hi).exp();
        let mut den = num;
        for (j, &c) in row.iter().enumerate() {
            if j != t {
                den += (mc.s * c - hi).exp();
            }
        }
        out.push(den.ln() - (a_t - hi));
    }
    Ok(out)
}

/// Conditional-margin softmax: mean loss and cosine gradient.
///
/// With p_t = e^{a_t}/den and q_j = e^{s c_j}/den,
/// d/dc_t = alpha m1 (p_t - 1) / B and d/dc_j = s q_j / B.
pub fn c_softmax(
    cl: &CosineLogits,
    labels: &[usize],
    mc: &MarginConfig,
) -> Result<LossResult, LossError> {
    let per_sample = c_softmax_per_sample(cl, labels, mc)?;
    let (b, m) = (cl.batch(), cl.classes());
    let cos = cl.cos();
    let value = per_sample.iter().sum::<f64>() / b as f64;

    let mut grad = vec![0.0; b * m];
    for i in 0..b {
        let row = cos.row(i);
        let t = labels[i];
        let a_t = mc.alpha * (mc.m1 * row[t] + mc.m2);
        let mut hi = a_t;
        for (j, &c) in row.iter().enumerate() {
            if j != t {
                hi = hi.max(mc.s * c);
            }
        }
        let num = (a_t - hi).exp();
        let mut den = num;
        for (j, &c) in row.iter().enumerate() {
            if j != t {
                den += (mc.s * c - hi).exp();
            }
        }
        for (j, &c) in row.iter().enumerate() {
            if j == t {
                grad[i * m + j] = mc.alpha * mc.m1 * (num / den - 1.0) / b as f64;
            } else {
                grad[i * m + j] = mc.s * (mc.s * c - hi).exp() / den / b as f64;
            }
        }
    }
    Ok(LossResult {
        value,
        d_cos: Tensor::matrix(b, m, grad)?,
    })
}

fn margined_logits(
    cl: &CosineLogits,
    labels: &[usize],
    target_map: impl Fn(f64) -> (f64, f64), // cos_t -> (logit, dlogit/dcos)
    s: f64,
) -> Result<(Tensor, Tensor), LossError> {
    let (b, m) = (cl.batch(), cl.classes());
    check_labels(b, m, labels)?;
    let cos = cl.cos();
    let mut logits = vec![0.0; b * m];
    let mut dlogit = vec![s; b * m];
    for i in 0..b {
        let row = cos.row(i);
        for j in 0..m {
            if j == labels[i] {
                let (z, dz) = target_map(row[j]);
                logits[i * m + j] = z;
                dlogit[i * m + j] = dz;
            } else {
                logits[i * m + j] = s * row[j];
            }
        }
    }
    Ok((
        Tensor::matrix(b, m, logits)?,
        Tensor::matrix(b, m, dlogit)?,
    ))
}

fn margined_ce(
    cl: &CosineLogits,
    labels: &[usize],
    target_map: impl Fn(f64) -> (f64, f64),
    s: f64,
) -> Result<LossResult, LossError> {
    let (logits, dlogit) = margined_logits(cl, labels, target_map, s)?;
    let base = softmax_ce(&logits, labels)?;
    Ok(LossResult {
        value: base.value,
        d_cos: crate::tensor::hadamard(&base.d_cos, &dlogit)?,
    })
}

/// Additive cosine margin: target logit s*(cos_t - m), others s*cos_j.
pub fn cosface(cl: &CosineLogits, labels: &[usize], m: f64, s: f64) -> Result<LossResult, LossError> {
    margined_ce(cl, labels, |c| (s * (c - m), s), s)
}

/// Per-sample additive-cosine-margin losses.
pub fn cosface_per_sample(
    cl: &CosineLogits,
    labels: &[usize],
    m: f64,
    s: f64,
) -> Result<Vec<f64>, LossError> {
    let (logits, _) = margined_logits(cl, labels, |c| (s * (c - m), s), s)?;
    softmax_ce_per_sample(&logits, labels)
}

/// Cosine clamp bound for the angular margin; acos is differentiated away
/// from exactly +-1 where its derivative diverges.
pub const ARC_CLAMP: f64 = 1e-7;

/// Additive angular margin: target logit s*cos(acos(cos_t) + m). The target
/// cosine is clamped into [-1 + ARC_CLAMP, 1 - ARC_CLAMP] first (with a log
/// warning), which caps the otherwise unbounded normalization gradient.
pub fn arcface(cl: &CosineLogits, labels: &[usize], m: f64, s: f64) -> Result<LossResult, LossError> {
    let lo = -1.0 + ARC_CLAMP;
    let hi = 1.0 - ARC_CLAMP;
    margined_ce(
        cl,
        labels,
        |c| {
            let clamped = if c < lo || c > hi {
                log::warn!("target cosine {c} clamped for angular margin");
                c.clamp(lo, hi)
            } else {
                c
            };
            let sin_theta = (1.0 - clamped * clamped).sqrt();
            let z = s * (clamped * m.cos() - sin_theta * m.sin());
            let dz = if c < lo || c > hi {
                0.0 // flat outside the clamp range
            } else {
                s * (m.cos() + clamped / sin_theta * m.sin())
            };
            (z, dz)
        },
        s,
    )
}

// ---------------------------------------------------------------------------
// conditional triplet
// ---------------------------------------------------------------------------

/// Triplet loss value plus gradients for the similarity pair and all three
/// embedding tensors.
#[derive(Debug, Clone)]
pub struct TripletResult {
    pub value: f64,
    /// B x 2 gradient w.r.t. the per-triplet similarities
    /// [positive, negative].
    pub d_sims: Tensor,
    pub d_anchor: Tensor,
    pub d_positive: Tensor,
    pub d_negative: Tensor,
}

fn row_cosine(a: &[f64], b: &[f64], index: usize) -> Result<(f64, f64, f64), LossError> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(LossError::DegenerateInput {
            what: "triplet embedding row",
            index,
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb), na, nb))
}

/// Adds the pullback of cos(a, b) through both rows:
/// d_a = g * (b/|b| - cos * a/|a|) / |a|, symmetrically for b.
fn add_pair_cosine_vjp(
    a: &[f64],
    b: &[f64],
    cos: f64,
    na: f64,
    nb: f64,
    g: f64,
    d_a: &mut [f64],
    d_b: &mut [f64],
) {
    for k in 0..a.len() {
        let au = a[k] / na;
        let bu = b[k] / nb;
        d_a[k] += g * (bu - cos * au) / na;
        d_b[k] += g * (au - cos * bu) / nb;
    }
}

/// Ratio-hinge triplet objective, summed over the batch:
///
/// loss = sum_i max(0, (s_n + 1) / (s_p + 1) - m)
///
/// where s_p = cos(anchor_i, positive_i) and s_n = cos(anchor_i,
/// negative_i). Shifting both similarities into (0, 2) makes the hinge
/// threshold a ratio: a tight positive pair shrinks the denominator and
/// demands a proportionally smaller negative similarity.
pub fn triplet_conditional(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    m: f64,
) -> Result<TripletResult, LossError> {
    if anchor.rank() != 2 || anchor.dims() != positive.dims() || anchor.dims() != negative.dims() {
        return Err(ShapeError::Mismatch {
            op: "triplet_conditional",
            left: anchor.dims().to_vec(),
            right: positive.dims().to_vec(),
        }
        .into());
    }
    let (b, l) = (anchor.rows(), anchor.cols());
    let mut value = 0.0;
    let mut d_sims = vec![0.0; b * 2];
    let mut d_anchor = vec![0.0; b * l];
    let mut d_positive = vec![0.0; b * l];
    let mut d_negative = vec![0.0; b * l];

    for i in 0..b {
        let (a, p, n) = (anchor.row(i), positive.row(i), negative.row(i));
        let (s_p, na, np) = row_cosine(a, p, i)?;
        let (s_n, _, nn) = row_cosine(a, n, i)?;
        let ratio = (s_n + 1.0) / (s_p + 1.0);
        if ratio - m <= 0.0 {
            continue; // hinge inactive: zero loss, zero gradient
        }
        value += ratio - m;
        let g_p = -(s_n + 1.0) / ((s_p + 1.0) * (s_p + 1.0));
        let g_n = 1.0 / (s_p + 1.0);
        d_sims[i * 2] = g_p;
        d_sims[i * 2 + 1] = g_n;
        add_pair_cosine_vjp(
            a,
            p,
            s_p,
            na,
            np,
            g_p,
            &mut d_anchor[i * l..(i + 1) * l],
            &mut d_positive[i * l..(i + 1) * l],
        );
        add_pair_cosine_vjp(
            a,
            n,
            s_n,
            na,
            nn,
            g_n,
            &mut d_anchor[i * l..(i + 1) * l],
            &mut d_negative[i * l..(i + 1) * l],
        );
    }

    Ok(TripletResult {
        value,
        d_sims: Tensor::matrix(b, 2, d_sims)?,
        d_anchor: Tensor::matrix(b, l, d_anchor)?,
        d_positive: Tensor::matrix(b, l, d_positive)?,
        d_negative: Tensor::matrix(b, l, d_negative)?,
    })
}

// ---------------------------------------------------------------------------
// margin geometry
// ---------------------------------------------------------------------------

/// Loss geometries whose two-class decision regions can be drawn on the
/// (cos_1, cos_2) square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginLoss {
    NSoftmax,
    CSoftmax { m1: f64, m2: f64 },
    CosFace { m: f64 },
    ArcFace { m: f64 },
}

/// Classification of a grid point by the pairwise decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RegionLabel {
    /// A class-1 sample here satisfies its margin condition.
    Class1 = 0,
    /// A class-2 sample here satisfies its margin condition.
    Class2 = 1,
    /// Neither class can claim the point: the separating band.
    MarginBand = 2,
}

/// Margined target logit as a function of the target cosine, with the scale
/// factored out. Comparing it against the plain rival cosine reproduces the
/// two-class decision at alpha = s for any positive scale, which is why the
/// map needs no scale parameter.
fn margined_target(loss: &MarginLoss, c: f64) -> f64 {
    match loss {
        MarginLoss::NSoftmax => c,
        MarginLoss::CSoftmax { m1, m2 } => m1 * c + m2,
        MarginLoss::CosFace { m } => c - m,
        MarginLoss::ArcFace { m } => {
            let c = c.clamp(-1.0 + ARC_CLAMP, 1.0 - ARC_CLAMP);
            (c.acos() + m).cos()
        }
    }
}

/// Two-class decision map over the [-1, 1]^2 cosine square. Row r runs over
/// cos_2 from +1 down to -1, column c over cos_1 from -1 to +1, both with
/// `resolution` samples including the endpoints.
#[derive(Debug, Clone)]
pub struct MarginMap {
    pub resolution: usize,
    pub labels: Vec<RegionLabel>,
}

impl MarginMap {
    pub fn label_at(&self, row: usize, col: usize) -> RegionLabel {
        self.labels[row * self.resolution + col]
    }

    /// Grid coordinate along either axis for index i.
    pub fn coord(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.resolution - 1) as f64
    }
}

/// Rasterizes the decision regions of `loss`. `resolution` must be at least
/// 2 so the endpoints are representable.
pub fn margin_map(loss: &MarginLoss, resolution: usize) -> Result<MarginMap, LossError> {
    if resolution < 2 {
        return Err(LossError::Resolution { got: resolution });
    }
    if let MarginLoss::CSoftmax { m1, m2 } = loss {
        MarginConfig {
            m1: *m1,
            m2: *m2,
            alpha: 1.0,
            s: 1.0,
        }
        .validate()?;
    }
    let step = 2.0 / (resolution - 1) as f64;
    let mut labels = Vec::with_capacity(resolution * resolution);
    for r in 0..resolution {
        let cos2 = 1.0 - r as f64 * step;
        for c in 0..resolution {
            let cos1 = -1.0 + c as f64 * step;
            let one_wins = margined_target(loss, cos1) > cos2;
            let two_wins = margined_target(loss, cos2) > cos1;
            labels.push(match (one_wins, two_wins) {
                (true, false) => RegionLabel::Class1,
                (false, true) => RegionLabel::Class2,
                (false, false) => RegionLabel::MarginBand,
                // Both conditions can only hold simultaneously for slopes
                // above 1; resolve by the larger margined logit.
                (true, true) => {
                    if margined_target(loss, cos1) - cos2 >= margined_target(loss, cos2) - cos1 {
                        RegionLabel::Class1
                    } else {
                        RegionLabel::Class2
                    }
                }
            });
        }
    }
    Ok(MarginMap { resolution, labels })
}

/// Closed-form width of the margin band along the cos_2 axis at fixed
/// cos_1, measured between the two decision boundary lines (clipping to the
/// visible square is deliberately not applied).
pub fn margin_band_width(loss: &MarginLoss, cos1: f64) -> f64 {
    match loss {
        MarginLoss::NSoftmax => 0.0,
        // band: m1*cos1 + m2 <= cos2 <= (cos1 - m2)/m1
        MarginLoss::CSoftmax { m1, m2 } => (cos1 - m2) / m1 - (m1 * cos1 + m2),
        MarginLoss::CosFace { m } => 2.0 * m,
        // band: cos(theta + m) <= cos2 <= cos(theta - m)
        MarginLoss::ArcFace { m } => {
            let theta = cos1.clamp(-1.0 + ARC_CLAMP, 1.0 - ARC_CLAMP).acos();
            2.0 * m.sin() * theta.sin()
        }
    }
    .max(0.0)
}

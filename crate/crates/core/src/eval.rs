//! Open-set verification and identification metrics.
//!
//! Identification is closed over a gallery: [`rank1`] asks how often a
//! probe's most similar gallery entry shares its identity. Verification is
//! threshold-based: [`vr_at_far`] reports how many genuine pairs clear the
//! loosest score threshold whose false-accept rate on the impostor pairs
//! still stays within the budget.
//!
//! The threshold search only ever considers observed impostor scores plus
//! the value just above the largest one. The empirical FAR is a step
//! function jumping exactly at those scores, so any other threshold gives
//! the same (VR, FAR) operating point as one member of that candidate set.

use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("{what} row {index} has zero norm; cosine is undefined")]
    Degenerate { what: &'static str, index: usize },
    #[error("{what} is empty")]
    EmptySet { what: &'static str },
    #[error("false-accept rate must lie in (0, 1], got {far}")]
    BadFar { far: f64 },
    #[error("expected {expected} ids, got {got}")]
    IdCount { expected: usize, got: usize },
    #[error("probe id {id} does not appear in the gallery")]
    MissingId { id: usize },
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
}

/// All pairwise cosines between rows of `probe` (P x L) and rows of
/// `gallery` (G x L); entry (i, j) is cos(probe_i, gallery_j).
pub fn cosine_similarity_matrix(probe: &Tensor, gallery: &Tensor) -> Result<Tensor, EvalError> {
    if probe.rank() != 2 || gallery.rank() != 2 || probe.cols() != gallery.cols() {
        return Err(ShapeError::Mismatch {
            op: "cosine_similarity_matrix",
            left: probe.dims().to_vec(),
            right: gallery.dims().to_vec(),
        }
        .into());
    }
    let (p, l) = (probe.rows(), probe.cols());
    let g = gallery.rows();

    let norm_rows = |t: &Tensor, what: &'static str| -> Result<Vec<f64>, EvalError> {
        (0..t.rows())
            .map(|i| {
                let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    Err(EvalError::Degenerate { what, index: i })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let pn = norm_rows(probe, "probe")?;
    let gn = norm_rows(gallery, "gallery")?;

    let mut out = vec![0.0; p * g];
    for i in 0..p {
        let pr = probe.row(i);
        for j in 0..g {
            let gr = gallery.row(j);
            let dot: f64 = (0..l).map(|k| pr[k] * gr[k]).sum();
            out[i * g + j] = dot / (pn[i] * gn[j]);
        }
    }
    Ok(Tensor::matrix(p, g, out)?)
}

/// Fraction of probes whose highest-scoring gallery entry carries the
/// probe's identity. Ties go to the lowest gallery index, so a tie against
/// the correct entry only counts when the correct entry comes first.
pub fn rank1(
    sims: &Tensor,
    probe_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<f64, EvalError> {
    let (p, g) = (sims.rows(), sims.cols());
    if probe_ids.len() != p {
        return Err(EvalError::IdCount {
            expected: p,
            got: probe_ids.len(),
        });
    }
    if gallery_ids.len() != g {
        return Err(EvalError::IdCount {
            expected: g,
            got: gallery_ids.len(),
        });
    }
    if p == 0 || g == 0 {
        return Err(EvalError::EmptySet {
            what: if p == 0 { "probe set" } else { "gallery" },
        });
    }
    // a probe whose identity is not enrolled can never score a hit, which
    // silently deflates the metric; treat it as caller error instead
    for &id in probe_ids {
        if !gallery_ids.contains(&id) {
            return Err(EvalError::MissingId { id });
        }
    }
    let mut hits = 0usize;
    for i in 0..p {
        let row = sims.row(i);
        let mut best = 0usize;
        for (j, &s) in row.iter().enumerate().skip(1) {
            if s > row[best] {
                best = j;
            }
        }
        if gallery_ids[best] == probe_ids[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / p as f64)
}

/// Verification rate at a false-accept budget, with the threshold that
/// realized it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VrResult {
    pub vr: f64,
    pub threshold: f64,
}

/// Picks the smallest impostor score whose accept rule (score >= t) keeps
/// the impostor accept fraction within `far`, then reports the genuine
/// accept fraction at that threshold. When even the largest impostor score
/// overshoots the budget, the threshold moves just above it, which drives
/// the empirical FAR to zero.
pub fn vr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<VrResult, EvalError> {
    if genuine.is_empty() {
        return Err(EvalError::EmptySet {
            what: "genuine scores",
        });
    }
    if impostor.is_empty() {
        return Err(EvalError::EmptySet {
            what: "impostor scores",
        });
    }
    if !(far > 0.0 && far <= 1.0) {
        return Err(EvalError::BadFar { far });
    }
    for (index, &s) in genuine.iter().chain(impostor).enumerate() {
        if !s.is_finite() {
            return Err(EvalError::NonFiniteScore { index });
        }
    }

    let mut sorted: Vec<f64> = impostor.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len() as f64;

    // descending ranks: sorted[k] is >= exactly (len - k) impostors, so its
    // empirical FAR is (len - k) / len; scan ascending for the first score
    // inside the budget
    let mut threshold = None;
    for (k, &s) in sorted.iter().enumerate() {
        // skip duplicate scores: only the first occurrence carries the
        // correct count
        if k > 0 && s == sorted[k - 1] {
            continue;
        }
        let far_here = (sorted.len() - k) as f64 / n;
        if far_here <= far {
            threshold = Some(s);
            break;
        }
    }
    let threshold = threshold.unwrap_or_else(|| {
        // even the top impostor score accepts too many: step just past it
        next_up(*sorted.last().expect("nonempty"))
    });

    let accepted = genuine.iter().filter(|&&s| s >= threshold).count();
    Ok(VrResult {
        vr: accepted as f64 / genuine.len() as f64,
        threshold,
    })
}

/// Smallest f64 strictly greater than `x` (finite inputs).
fn next_up(x: f64) -> f64 {
    if x == f64::INFINITY {
        return x;
    }
    let bits = if x == 0.0 {
        1 // +0 and -0 both step to the smallest positive subnormal
    } else if x > 0.0 {
        x.to_bits() + 1
    } else {
        x.to_bits() - 1
    };
    f64::from_bits(bits)
}

/// One operating point of the verification curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarPoint {
    pub far: f64,
    pub vr: f64,
    pub threshold: f64,
}

/// Identification and verification summary of one probe/gallery split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rank1: f64,
    pub points: Vec<FarPoint>,
    pub genuine_count: usize,
    pub impostor_count: usize,
}

impl EvalReport {
    /// Header row plus one data row: rank-1, then the verification rate at
    /// each operating point in report order, 9 significant digits.
    pub fn csv(&self) -> String {
        let mut header = String::from("rank1");
        let mut row = crate::io::csv_num(self.rank1);
        for p in &self.points {
            header.push_str(&format!(",vr_at_far_{}", p.far));
            row.push(',');
            row.push_str(&crate::io::csv_num(p.vr));
        }
        format!("{header}\n{row}\n")
    }
}

/// Default false-accept budgets reported by the evaluation tools.
pub const DEFAULT_FARS: [f64; 3] = [0.01, 0.001, 0.0001];

/// Splits a similarity matrix into genuine and impostor scores by identity
/// and evaluates every requested false-accept budget.
pub fn vr_at_far_levels(
    sims: &Tensor,
    probe_ids: &[usize],
    gallery_ids: &[usize],
    fars: &[f64],
) -> Result<Vec<FarPoint>, EvalError> {
    if probe_ids.len() != sims.rows() {
        return Err(EvalError::IdCount {
            expected: sims.rows(),
            got: probe_ids.len(),
        });
    }
    if gallery_ids.len() != sims.cols() {
        return Err(EvalError::IdCount {
            expected: sims.cols(),
            got: gallery_ids.len(),
        });
    }
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..sims.rows() {
        for j in 0..sims.cols() {
            if probe_ids[i] == gallery_ids[j] {
                genuine.push(sims.at2(i, j));
            } else {
                impostor.push(sims.at2(i, j));
            }
        }
    }
    fars.iter()
        .map(|&far| {
            vr_at_far(&genuine, &impostor, far).map(|v| FarPoint {
                far,
                vr: v.vr,
                threshold: v.threshold,
            })
        })
        .collect()
}

/// Scores probe embeddings against gallery embeddings and summarizes both
/// metrics. Genuine pairs are those sharing an identity.
pub fn evaluate(
    probe: &Tensor,
    probe_ids: &[usize],
    gallery: &Tensor,
    gallery_ids: &[usize],
    fars: &[f64],
) -> Result<EvalReport, EvalError> {
    let sims = cosine_similarity_matrix(probe, gallery)?;
    let r1 = rank1(&sims, probe_ids, gallery_ids)?;
    let points = vr_at_far_levels(&sims, probe_ids, gallery_ids, fars)?;

    let genuine_count = probe_ids
        .iter()
        .map(|pid| gallery_ids.iter().filter(|gid| *gid == pid).count())
        .sum::<usize>();
    Ok(EvalReport {
        rank1: r1,
        points,
        genuine_count,
        impostor_count: probe_ids.len() * gallery_ids.len() - genuine_count,
    })
}

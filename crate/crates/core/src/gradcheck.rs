//! Central finite-difference gradient verification.
//!
//! Analytic gradients throughout the crate are validated against the
//! symmetric difference quotient (f(x+h) - f(x-h)) / 2h with h = 1e-5.
//! Comparison uses |a - b| / max(|a|, |b|, 1): relative for large entries,
//! absolute near zero, so difference-quotient noise on vanishing gradients
//! (order 1e-11 in f64) cannot dominate the measure.

/// Step size for the symmetric difference quotient.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold for analytic-vs-numeric gradient agreement.
pub const GRAD_TOL: f64 = 1e-6;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let original = probe[i];
            probe[i] = original + h;
            let above = f(&probe);
            probe[i] = original - h;
            let below = f(&probe);
            probe[i] = original;
            (above - below) / (2.0 * h)
        })
        .collect()
}

/// Error between an analytic and a numeric gradient entry, scaled by
/// max(|a|, |b|, 1).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest [`relative_error`] over two equally long gradient slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient slices differ in length"
    );
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

//! Gradient checking against central finite differences.
//!
//! The numeric side never touches a layer's backward path: it only calls a
//! scalar-valued closure twice per coordinate, so it stays an independent
//! oracle for the analytic gradients.

/// Step size for central differences. With 64-bit arithmetic this puts
/// truncation and roundoff error both well below the 1e-4 acceptance
/// threshold for gradients of order one.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient values. The denominator is floored
/// at 1e-4 so coordinates whose true gradient is essentially zero are
/// judged on an absolute scale instead of a noise quotient.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Largest per-coordinate [`rel_error`] between two gradients.
///
/// Panics if the lengths differ — that is a harness bug, not a gradient
/// mismatch.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

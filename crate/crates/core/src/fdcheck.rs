//! Central finite differences for gradient verification.
//!
//! The losses in this crate ship analytic gradients; every one of them is
//! checked against this harness. The closure receives a flat parameter
//! vector and returns the scalar loss.

/// Gradient of `f` at `point` by central differences with step `step`.
pub fn central_diff_grad<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut work = point.to_vec();
    for i in 0..point.len() {
        work[i] = point[i] + step;
        let plus = f(&work);
        work[i] = point[i] - step;
        let minus = f(&work);
        work[i] = point[i];
        grads.push((plus - minus) / (2.0 * step));
    }
    grads
}

/// Floor for the relative-error denominator. Entries below the floor are
/// effectively compared at absolute tolerance floor * rel_tol.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest pairwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

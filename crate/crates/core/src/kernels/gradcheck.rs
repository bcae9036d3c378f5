//! Central finite differences, the oracle every backward pass is checked against.

use crate::error::{Error, Result};

/// Relative error between an analytic value and its numeric estimate:
/// |a - b| / max(1, |a|, |b|). The floor of 1 makes the measure absolute for
/// tiny gradients, where central differences are dominated by rounding.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Worst relative error over two equally long slices.
pub fn max_relative_error(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "gradient length mismatch");
    xs.iter()
        .zip(ys)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Central-difference gradient estimate of a scalar function:
/// g_i = (f(p + eps*e_i) - f(p - eps*e_i)) / (2*eps).
///
/// `f` must be deterministic; a non-finite evaluation is an error.
pub fn finite_difference_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument {
            op: "finite_difference_gradient",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = f(&work);
        work[i] = orig - eps;
        let minus = f(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_gradient",
                detail: format!("f evaluated non-finite at coordinate {i}: {plus} / {minus}"),
            });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

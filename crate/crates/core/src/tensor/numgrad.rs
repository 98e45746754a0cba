//! Central finite differences, the reference for every hand-written gradient.

use super::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h·eᵢⱼ) − f(x − h·eᵢⱼ)) / 2h` for every entry of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[k] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function evaluation at entry ({}, {})",
                k / x.cols().max(1),
                k % x.cols().max(1)
            )));
        }
        grad.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Blockwise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
///
/// When both norms fall below `1e-10` the absolute difference is returned, so
/// identically-zero gradients compare as equal.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic.sub(numeric).norm();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Matrix::from_fn(3, 2, |i, j| i as f64 - 0.3 * j as f64);
        let g = finite_diff_grad(|m| m.sum(), &x, DEFAULT_STEP).unwrap();
        assert!(g.max_abs_diff(&Matrix::filled(3, 2, 1.0)) < 1e-9);
    }

    #[test]
    fn quadratic_recovers_input() {
        let x = Matrix::from_fn(2, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.2));
        let g = finite_diff_grad(|m| 0.5 * m.dot(m), &x, DEFAULT_STEP).unwrap();
        assert!(g.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Matrix::zeros(1, 2);
        let err = finite_diff_grad(|m| 1.0 / m[(0, 0)].abs().min(0.0), &x, 1e-3);
        assert!(err.is_err());
    }

    #[test]
    fn relative_error_of_zeros_is_zero() {
        assert_eq!(relative_error(&Matrix::zeros(2, 2), &Matrix::zeros(2, 2)), 0.0);
    }
}

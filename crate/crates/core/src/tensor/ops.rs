//! Elementwise nonlinearities and row-wise softmax.

use super::Matrix;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Vector-Jacobian product of softmax: given `y = softmax(x)` and `dy`,
/// returns `dx = y ⊙ (dy − ⟨dy, y⟩)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - inner)).collect()
}

#[inline]
pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_deriv(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn leaky_relu(m: &Matrix, slope: f64) -> Matrix {
    debug_assert!(slope > 0.0 && slope < 1.0);
    m.map(|x| leaky_relu_scalar(x, slope))
}

pub fn sigmoid(m: &Matrix) -> Matrix {
    m.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_row() {
        let p = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_rows(&Matrix::from_rows(&[[1000.0, 0.0]]));
        assert!(p.is_finite());
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(p[(0, 1)] < 1e-300 || p[(0, 1)] == 0.0);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_rows(&Matrix::from_rows(&[[1f64.ln(), 3f64.ln()]]));
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((p[(0, 1)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn activations_by_definition() {
        assert_eq!(leaky_relu_scalar(-1.0, 0.2), -0.2);
        assert_eq!(leaky_relu_scalar(2.5, 0.2), 2.5);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid(&Matrix::from_rows(&[[800.0, -800.0]])).is_finite());
    }
}

//! Sinkhorn–Knopp balancing towards a doubly stochastic matrix, with a
//! reverse pass through the iterations that were actually executed.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Sinkhorn {
    pub matrix: Matrix,
    pub iterations: usize,
    /// Largest `|sum − 1|` over rows and columns of `matrix`.
    pub residual: f64,
}

impl Sinkhorn {
    pub fn converged(&self, tol: f64) -> bool {
        self.residual <= tol
    }
}

/// One row pass followed by one column pass.
#[derive(Clone, Debug)]
struct SinkhornStep {
    row_sums: Vec<f64>,
    after_rows: Matrix,
    col_sums: Vec<f64>,
    after_cols: Matrix,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct SinkhornTape {
    steps: Vec<SinkhornStep>,
}

fn check_support(m: &Matrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Shape {
            op: "sinkhorn_ds",
            left: m.shape(),
            right: (m.rows(), m.rows()),
        });
    }
    if let Some(i) = m.row_sums().iter().position(|&s| s <= 0.0) {
        return Err(Error::Disconnected {
            axis: "row",
            index: i,
        });
    }
    if let Some(j) = m.col_sums().iter().position(|&s| s <= 0.0) {
        return Err(Error::Disconnected {
            axis: "column",
            index: j,
        });
    }
    Ok(())
}

fn max_deviation(m: &Matrix) -> f64 {
    m.row_sums()
        .into_iter()
        .chain(m.col_sums())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Alternating row/column normalization until every row and column sum is
/// within `tol` of one, or `iters` passes have run.
pub fn sinkhorn_ds(m: &Matrix, iters: usize, tol: f64) -> Result<Sinkhorn> {
    sinkhorn_taped(m, iters, tol).map(|(s, _)| s)
}

pub(crate) fn sinkhorn_taped(m: &Matrix, iters: usize, tol: f64) -> Result<(Sinkhorn, SinkhornTape)> {
    if m.as_slice().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::NonFinite(
            "sinkhorn input must be finite and nonnegative".into(),
        ));
    }
    check_support(m)?;
    let n = m.rows();
    let mut tape = SinkhornTape::default();
    let mut current = m.clone();
    let mut residual = max_deviation(&current);
    let mut iterations = 0;
    while iterations < iters && residual > tol {
        let row_sums = current.row_sums();
        let mut after_rows = current;
        for (i, s) in row_sums.iter().enumerate() {
            after_rows.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let col_sums = after_rows.col_sums();
        let mut after_cols = after_rows.clone();
        for i in 0..n {
            for (v, s) in after_cols.row_mut(i).iter_mut().zip(&col_sums) {
                *v /= s;
            }
        }
        residual = max_deviation(&after_cols);
        current = after_cols.clone();
        tape.steps.push(SinkhornStep {
            row_sums,
            after_rows,
            col_sums,
            after_cols,
        });
        iterations += 1;
    }
    Ok((
        Sinkhorn {
            matrix: current,
            iterations,
            residual,
        },
        tape,
    ))
}

impl SinkhornTape {
    /// Pulls a gradient on the balanced output back to the input matrix.
    pub(crate) fn backward(&self, upstream: &Matrix) -> Matrix {
        let mut grad = upstream.clone();
        for step in self.steps.iter().rev() {
            let n = grad.rows();
            // Y_ij = R_ij / c_j  ⇒  dR_ij = (dY_ij − Σ_k dY_kj Y_kj) / c_j
            let mut inner = vec![0.0; n];
            for i in 0..n {
                for (acc, (g, y)) in inner
                    .iter_mut()
                    .zip(grad.row(i).iter().zip(step.after_cols.row(i)))
                {
                    *acc += g * y;
                }
            }
            for i in 0..n {
                for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                    *g = (*g - inner[j]) / step.col_sums[j];
                }
            }
            // R_ij = X_ij / r_i  ⇒  dX_ij = (dR_ij − Σ_k dR_ik R_ik) / r_i
            for i in 0..n {
                let inner: f64 = grad
                    .row(i)
                    .iter()
                    .zip(step.after_rows.row(i))
                    .map(|(g, r)| g * r)
                    .sum();
                let r = step.row_sums[i];
                grad.row_mut(i).iter_mut().for_each(|g| *g = (*g - inner) / r);
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error, Rng, DEFAULT_STEP};

    #[test]
    fn uniform_block() {
        let s = sinkhorn_ds(&Matrix::filled(2, 2, 1.0), 50, 1e-6).unwrap();
        assert_eq!(s.matrix, Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn permutation_is_fixed_point() {
        let p = Matrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
        let s = sinkhorn_ds(&p, 50, 1e-6).unwrap();
        assert_eq!(s.matrix, p);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn small_dense_matrix_balances_quickly() {
        let s = sinkhorn_ds(&Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), 50, 1e-6).unwrap();
        assert!(s.iterations <= 50);
        for v in s.matrix.row_sums().into_iter().chain(s.matrix.col_sums()) {
            assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_row_or_column_is_an_error() {
        let m = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]);
        assert!(matches!(
            sinkhorn_ds(&m, 10, 1e-6),
            Err(Error::Disconnected {
                axis: "row",
                index: 1
            })
        ));
        let m = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            sinkhorn_ds(&m, 10, 1e-6),
            Err(Error::Disconnected {
                axis: "column",
                index: 1
            })
        ));
    }

    #[test]
    fn unrolled_backward_matches_finite_differences() {
        let mut rng = Rng::new(4);
        for iters in [1, 3, 25] {
            let m = rng.uniform_matrix(4, 4, 0.1, 2.0);
            let g = rng.normal_matrix(4, 4, 1.0);
            // tol = 0 keeps the iteration count fixed under perturbation
            let (_, tape) = sinkhorn_taped(&m, iters, 0.0).unwrap();
            let analytic = tape.backward(&g);
            let numeric = finite_diff_grad(
                |x| sinkhorn_ds(x, iters, 0.0).unwrap().matrix.dot(&g),
                &m,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(relative_error(&analytic, &numeric) < 1e-7, "iters {iters}");
        }
    }
}

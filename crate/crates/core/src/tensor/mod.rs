//! Dense matrices, activations, seeded randomness and the finite-difference oracle.

pub mod csv;
mod matrix;
mod numgrad;
mod ops;
mod rng;

pub use matrix::{dot, Matrix};
pub use numgrad::{finite_diff_grad, relative_error, DEFAULT_STEP};
pub use ops::{
    leaky_relu, leaky_relu_deriv, leaky_relu_scalar, sigmoid, sigmoid_scalar, softmax_backward,
    softmax_in_place, softmax_rows,
};
pub use rng::{derive_seed, Rng};

/// Glorot/Xavier uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_matrix(rows, cols, -limit, limit)
}

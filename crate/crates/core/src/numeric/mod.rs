//! Minimal dense-matrix kernel with explicit per-operation backward passes,
//! an Adam optimizer, a finite-difference gradient checker and checkpoint
//! encoding.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod matrix;
pub mod ops;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{decode_matrix, encode_matrix, Checkpoint, EncodedMatrix, CHECKPOINT_FORMAT};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{
    concat_rows, matmul, matmul_backward, mean_pool_rows, mean_pool_rows_backward, softmax_rows,
    softmax_rows_backward, split_rows, Segments,
};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("{op}: incompatible shapes {left} and {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("matrix must have positive shape, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("{rows}x{cols} matrix needs {} values, got {len}", rows * cols)]
    Length { rows: usize, cols: usize, len: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("segment boundaries: {0}")]
    Segments(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl NumericError {
    pub(crate) fn shape(op: &'static str, a: &Matrix, b: &Matrix) -> Self {
        NumericError::Shape {
            op,
            left: format!("{}x{}", a.rows(), a.cols()),
            right: format!("{}x{}", b.rows(), b.cols()),
        }
    }
}

/// A trainable matrix and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Param {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<(), NumericError> {
        self.grad.add_assign(g)
    }

    pub fn len(&self) -> usize {
        self.value.rows() * self.value.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Entries drawn uniformly from `[-bound, bound]`.
pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

/// Seeded matrix with entries uniform in `[-1, 1]`; handy for tests and benches.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform_matrix(rows, cols, 1.0, &mut rng)
}

#[cfg(test)]
pub(crate) mod testing {
    pub use super::random_matrix;
}

//! Dense matrices, a define-by-run differentiation tape, and a
//! finite-difference gradient validator.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_subset, relative_error, GradCheckReport};
pub use matrix::Matrix;
pub use tape::{log_sum_exp, sigmoid, softmax, top_k_indices, Gradients, ParamId, ParamSet, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("expected {rows}x{cols} = {} values, got {len}", rows * cols)]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("{0}")]
    Contract(String),
}

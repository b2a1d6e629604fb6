//! Dense matrices and a reverse-mode gradient tape.
//!
//! Every differentiable operation records itself on a [`Tape`] together with
//! the handles of its inputs. [`Tape::backward`] walks the records in reverse
//! evaluation order and applies each operation's backward rule, accumulating
//! cotangents additively when a value feeds more than one consumer.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use tape::{DualValue, Tape, Var};

use thiserror::Error;

/// Norm floor for row normalization; rows below it are rejected.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {}x{} vs {}x{}", .left.0, .left.1, .right.0, .right.1)]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not fit a {rows}x{cols} matrix")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("row {row} has norm {norm:e}, below the normalization floor")]
    DegenerateRow { row: usize, norm: f64 },
    #[error("log-sum-exp over an empty set of terms ({rows}x{cols} with diagonal excluded)")]
    EmptySum { rows: usize, cols: usize },
    #[error("{op} requires a square matrix, got {}x{}", .shape.0, .shape.1)]
    NotSquare {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("{op} domain error at entry {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("expected a 1x1 value, got {}x{}", .shape.0, .shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: &Matrix, right: &Matrix) -> Self {
        TensorError::DimensionMismatch {
            op,
            left: left.shape(),
            right: right.shape(),
        }
    }
}

//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is rebuilt for every evaluation. Parameters live in a
//! [`ParamStore`] and are bound onto the tape as `Param` leaves;
//! [`Tape::backward`] writes `d root / d param` back into the store.
//! [`jvp`] adds forward-mode tangents as ordinary tape ops, which is what
//! makes Jacobian penalties differentiable with a single reverse sweep.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{compare_with_finite_differences, finite_diff_check, relative_error, GradCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{jvp, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("tensor {rows}x{cols} cannot hold {len} values")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("root must be a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("variable is not recorded on this tape")]
    ForeignVar,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("{op}: index out of range")]
    IndexOutOfRange { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}

#[cfg(test)]
mod tests;

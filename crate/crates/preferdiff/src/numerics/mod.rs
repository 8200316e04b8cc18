//! Dense f64 tensors and a replayable reverse-mode tape.
//!
//! Every differentiable computation in the crate is expressed through
//! [`Tape`] operations. A tape is built per forward pass, consumed by one
//! [`Tape::backward`] call, and dropped; parameters live outside the tape and
//! are bound as leaves each pass.

mod tape;
mod tensor;

pub use tape::{finite_difference_gradient, Gradients, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected} values for shape {shape:?}, got {got}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: unsupported operand rank for shape {shape:?}")]
    UnsupportedRank { op: &'static str, shape: Vec<usize> },
    #[error("{op}: zero-norm operand")]
    ZeroNorm { op: &'static str },
    #[error("{op}: operand contains a negative value")]
    NegativeOperand { op: &'static str },
    #[error("{op}: requires at least one input")]
    EmptyInput { op: &'static str },
    #[error("backward target must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

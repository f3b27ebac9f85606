//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation produced NaN or infinite values.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Two annotations claim the same token.
    #[error("overlapping annotation at token {token}")]
    Overlap { token: usize },

    /// A text input (data file, pretrained vectors) is malformed.
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint file cannot be loaded.
    #[error("checkpoint load failed at {field}: {msg}")]
    Load { field: String, msg: String },

    /// Training aborted (divergence, NaN gradients, ...).
    #[error("training failed: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;

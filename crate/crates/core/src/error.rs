//! Error type shared by all chaincalc modules.

use thiserror::Error;

/// Errors produced by chain, form, and stream operations.
#[derive(Debug, Error)]
pub enum ChainError {
    /// Operands live in different ambient dimensions, or an index is out of range.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A grade precondition was violated (e.g. pairing a 1-form with a 2-element).
    #[error("grade mismatch: {0}")]
    Grade(String),
    /// An order precondition was violated (e.g. mass norm of an order-1 element).
    #[error("order error: {0}")]
    Order(String),
    /// The operation is well-defined mathematically but deliberately not provided
    /// (e.g. pushforward of order >= 1 elements under a non-affine map).
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// An iteration failed to converge or produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Malformed input file or scenario object.
    #[error("schema violation: {0}")]
    Schema(String),
    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ChainError>;

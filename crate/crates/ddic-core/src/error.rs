//! Error type shared by every core module.

use alloc::string::String;

/// Failure modes of the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// Operands have incompatible dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Contract(String),
    /// The optimizer hit a non-finite loss or gradient.
    #[error("training failed at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },
    /// A numeric evaluation produced a non-finite result.
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),
}

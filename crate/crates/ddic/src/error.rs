//! Crate-wide error type for IO, parsing, and experiment orchestration.

use ddic_core::CoreError;

/// Anything that can go wrong outside the numeric core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed file contents (bad magic, truncation, ragged rows, ...).
    #[error("format error: {0}")]
    Format(String),
    /// Files that parse individually but disagree with each other.
    #[error("consistency error: {0}")]
    Consistency(String),
    /// Invalid configuration (unknown keys, missing columns, bad values).
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, Error>;

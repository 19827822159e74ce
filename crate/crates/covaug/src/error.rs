//! Crate-wide error type.

use thiserror::Error;

/// Failure modes shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative numerical routine failed to produce a usable result.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The requested operation is undefined for the active model variant.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// A text file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A file had the wrong overall shape (missing header, empty, ...).
    #[error("schema error: {0}")]
    Schema(String),

    /// A checkpoint was written by an incompatible format revision.
    #[error("incompatible checkpoint: found format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used throughout the crate.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }
}

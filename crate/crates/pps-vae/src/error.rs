//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    /// Bad CLI arguments or config-file contents.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: String, reason: String },

    /// Training produced a non-finite loss; names the offending term.
    #[error("non-finite loss at step {step}: term `{term}` is not finite")]
    NonFinite { step: u64, term: String },

    #[error("checkpoint version mismatch: file has {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity failure: {0}")]
    CheckpointIntegrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// Process exit code for the CLI: 2 usage/config, 3 numeric failure,
    /// 4 checkpoint incompatibility, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Contract(_) | Error::ShapeMismatch { .. } => 2,
            Error::Ingestion { .. } => 2,
            Error::NonFinite { .. } => 3,
            Error::CheckpointVersion { .. } | Error::CheckpointIntegrity(_) => 4,
            Error::Io(_) | Error::Json(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::io;

use thiserror::Error;

/// Errors produced by the library. Each variant maps to a stable CLI exit
/// code and FFI status code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("degenerate encoding: pre-normalization output is all zeros")]
    DegenerateEncoding,

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

impl Error {
    /// Process exit code used by the `uap` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::PreconditionViolation(_) => 2,
            Error::Io(_) | Error::Json(_) | Error::CorruptDataset(_) => 3,
            Error::DegenerateDataset(_) | Error::DegenerateEncoding => 4,
            Error::Integrity(_) => 5,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped so the CLI can map them onto distinct exit codes
/// (see [`Error::kind`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("cannot build split: {0}")]
    Split(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too long: {0}")]
    Overlength(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Io { .. } | Error::Schema { .. } | Error::Data(_) | Error::Split(_) => {
                ErrorKind::Data
            }
            _ => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

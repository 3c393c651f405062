//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by ingestion, validation, fusion, metrics, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem failure, with the path that triggered it.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file content; `line` is 1-based.
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },

    /// A dataset invariant does not hold.
    #[error("invalid dataset: {0}")]
    Validation(String),

    /// An input is outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract (mask shape, anchor membership, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration document is invalid; the message names the field.
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: path.into(),
            line,
            message: message.into(),
        }
    }
}

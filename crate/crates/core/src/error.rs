//! Error type shared by all modules.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum DrnError {
    /// A caller-supplied argument violates an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// File could not be read or written.
    #[error("i/o error for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Training aborted (non-finite loss or gradient, empty dataset, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Configuration file or flag rejected.
    #[error("config error: {0}")]
    Config(String),
}

impl DrnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DrnError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DrnError>;

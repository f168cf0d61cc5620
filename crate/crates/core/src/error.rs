use std::path::PathBuf;

use lwpt_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: {msg}")]
    Validation { path: PathBuf, line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Lookup(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs or configuration rather
    /// than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Lookup(_) | Error::Parse { .. } | Error::Validation { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

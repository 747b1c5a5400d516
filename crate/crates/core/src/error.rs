use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape or precondition violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Values that should never occur in valid data (NaN, out-of-range labels).
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt artifact: {0}")]
    Corruption(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem or by malformed files on it.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format(_) | Error::Corruption(_) | Error::Json(_)
        )
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

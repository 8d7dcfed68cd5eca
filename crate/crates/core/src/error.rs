use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("runtime state: {0}")]
    State(String),

    #[error("unsupported audio in {path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("weights file: {0}")]
    WeightsFormat(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the command-line front end.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::State(_) | Error::Tape(_) => ErrorKind::Usage,
            Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("FLOP accumulator overflow while computing {0}")]
    Overflow(&'static str),

    #[error("degenerate quadratic fit: {0}")]
    DegenerateFit(String),

    #[error("record {record}: {message}")]
    Record { record: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid model file: {0}")]
    Model(String),

    #[error("missing context: {0}")]
    MissingContext(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

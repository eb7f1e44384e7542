use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("training failed at epoch {epoch}: {detail}")]
    TrainingFailure { epoch: usize, detail: String },

    #[error("numerical failure at reverse step {step}: {detail}")]
    NumericalFailure { step: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

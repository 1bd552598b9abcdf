use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("sentence {sentence_id}: durations sum to {durations} frames but features have {frames}")]
    DurationMismatch {
        sentence_id: String,
        durations: usize,
        frames: usize,
    },

    #[error("invalid record {record}: {message}")]
    InvalidRecord { record: String, message: String },

    #[error("feature file: {0}")]
    FeatureFormat(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{stage}: non-finite loss at iteration {iteration}")]
    NonFiniteLoss { stage: String, iteration: usize },

    #[error("text embedding backend: {0}")]
    Backend(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

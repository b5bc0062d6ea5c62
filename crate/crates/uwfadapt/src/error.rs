//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stage `{stage}` requires `{missing}` to be completed first")]
    MissingStage { stage: String, missing: String },

    #[error("stage `{stage}` failed: {message}")]
    StageFailed { stage: String, message: String },

    #[error("checkpoint epoch {requested} not found; available epochs: {available:?}")]
    MissingCheckpoint {
        requested: usize,
        available: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn sample(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Sample {
            id: id.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

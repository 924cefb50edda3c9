use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence of length {len} exceeds context length {max}")]
    Overlength { len: usize, max: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unregistered method `{0}`")]
    UnregisteredMethod(String),

    #[error("i/o error on {path}: {source}")]
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
}

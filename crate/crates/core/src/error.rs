use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in document {doc_index}: field `{field}`: {message}")]
    MalformedRecord {
        doc_index: usize,
        field: String,
        message: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unparseable answer `{answer}` for question {question_id}")]
    BadAnswer { question_id: String, answer: String },

    #[error("invalid rule: {0}")]
    InvalidRule(String),

    #[error("model request failed: {0}")]
    Model(#[from] crate::agent::client::ModelError),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("operation not allowed in phase {phase}: {message}")]
    WrongPhase { phase: String, message: String },

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("cluster not offered: {0}")]
    NotOffered(String),

    #[error("candidate inconclusive: {0}")]
    Inconclusive(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("event log corrupted at line {line}: {message}")]
    CorruptLog { line: usize, message: String },

    #[error("sandbox setup failed: {0}")]
    Sandbox(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use crate::llm::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {what}: {message}")]
    Parse { what: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown attribute reference {0}")]
    UnresolvedRef(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index is empty")]
    EmptyIndex,

    #[error("embedder error: {0}")]
    Embedder(String),

    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error("too many MCQ candidates: {0} (at most 25)")]
    TooManyCandidates(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}

/// Failures surfaced by the LLM gateway and its backends.
#[derive(Debug, Clone, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),

    #[error("rate limited: {0}")]
    RateLimited(String),

    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },

    #[error("replay miss for stage {stage}: no cassette record with key {key}")]
    ReplayMiss { stage: Stage, key: String },

    #[error("scripted backend has no response for stage {stage}")]
    ScriptMiss { stage: Stage },

    #[error("could not parse {stage} output: {message}")]
    Parse { stage: Stage, message: String },

    #[error("malformed backend response: {0}")]
    Malformed(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::RateLimited(_))
    }
}

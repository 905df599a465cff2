use thiserror::Error;

/// Errors surfaced by every store, pipeline and provider in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("document `{0}` has no blocks")]
    EmptyDocument(String),
    #[error("invalid chunk policy: window {window} must exceed overlap {overlap}")]
    InvalidPolicy { window: usize, overlap: usize },
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("no fixture registered for prompt hash {0}")]
    FixtureMissing(String),
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("missing binding `{0}` for prompt template")]
    MissingBinding(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("`{0}` already exists")]
    AlreadyExists(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown collection `{0}`")]
    UnknownCollection(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("unknown chunk `{0}`")]
    UnknownChunk(String),

    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("aggregate over zero rows")]
    EmptyAggregate,

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("parse error: {0}")]
    Parse(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("misaligned run: {0}")]
    MisalignedRun(String),
    #[error("invalid config `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("invalid request field `{key}`: {message}")]
    InvalidRequest { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn invalid_request(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidRequest {
            key: key.into(),
            message: message.into(),
        }
    }

    /// The offending field name for validation errors, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            Error::Config { key, .. } | Error::InvalidRequest { key, .. } => Some(key),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

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

    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("{file}: row_id {row_id}, column `{column}`: {message}")]
    BadCell {
        file: String,
        row_id: String,
        column: String,
        message: String,
    },

    #[error("{file}: {message}")]
    Csv { file: String, message: String },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: i64 },

    #[error("question {id}: malformed tag token `{token}`")]
    MalformedTag { id: i64, token: String },

    #[error("unknown content id {id} ({kind})")]
    UnknownContent { id: i64, kind: &'static str },

    #[error("user {user_id}: events out of order (negative time lag {lag} at index {index})")]
    NegativeLag { user_id: i64, index: usize, lag: i64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("continuous feature must be non-negative, got {0}")]
    NegativeInput(f64),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFinite { step: u64, lr: f64, grad_norm: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config digest mismatch: checkpoint {stored}, config {expected}")]
    DigestMismatch { stored: String, expected: String },

    #[error("prepared data: {0}")]
    Format(String),

    #[error("stream: {0}")]
    Stream(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DigestMismatch { .. } => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}

use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error in record {index}: field `{field}`: {message}")]
    Schema {
        index: usize,
        field: String,
        message: String,
    },

    #[error("training failed: {0}")]
    TrainingFailed(String),

    #[error("numeric failure at step {step}: {message}")]
    NumericFailure { step: usize, message: String },

    #[error("empty collection: {0}")]
    EmptyCollection(String),

    #[error("policy failure: {0}")]
    Policy(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

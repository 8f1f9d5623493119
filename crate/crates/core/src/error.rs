use thiserror::Error;

#[derive(Debug, Error)]
pub enum PgcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PgcError>;

pub(crate) fn invalid(msg: impl Into<String>) -> PgcError {
    PgcError::InvalidArgument(msg.into())
}

pub(crate) fn mismatch(msg: impl Into<String>) -> PgcError {
    PgcError::ShapeMismatch(msg.into())
}

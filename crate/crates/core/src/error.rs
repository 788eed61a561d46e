use thiserror::Error;

/// Errors raised anywhere in the compression pipeline.
#[derive(Debug, Error)]
pub enum RdkvError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Evicting a token that holds the whole attention mass leaves nothing to renormalize.
    #[error("degenerate attention row: index {index} holds all probability mass")]
    DegenerateRow { index: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("code {code} does not fit in {bits} bits")]
    CodeOverflow { code: u32, bits: u8 },

    #[error("instance too large for exhaustive search: {units} units (limit {limit})")]
    TooLarge { units: usize, limit: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RdkvError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RdkvError::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(RdkvError::InvalidArgument(msg.into()))
}

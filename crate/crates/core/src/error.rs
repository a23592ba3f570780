use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("infeasible budget: {budget_bits} bits given, at least {min_bits} bits required")]
    Infeasible { min_bits: u64, budget_bits: u64 },
    #[error("state space too large: {0}")]
    Size(String),
    #[error("unsupported layout: {0}")]
    Unsupported(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("data format error: {0}")]
    Format(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

pub type Result<T> = std::result::Result<T, GradError>;

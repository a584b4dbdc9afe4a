use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] cdp_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact {path} was written by config {found}, expected {expected}")]
    HashMismatch { path: String, expected: String, found: String },
    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("stage {stage} failed: {reason}")]
    Stage { stage: String, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

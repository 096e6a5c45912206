use thiserror::Error;

/// Errors produced by the alignment toolkit.
#[derive(Debug, Error)]
pub enum AubError {
    #[error("empty log_sum_exp")]
    EmptyLogSumExp,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("finite-difference probe produced a non-finite loss at coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },

    #[error("non-finite gradient component at index {index}")]
    NonFiniteGradient { index: usize },

    #[error("backward called without a cached forward pass")]
    MissingForwardCache,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AubError>;

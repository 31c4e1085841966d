use thiserror::Error;

/// Errors surfaced by schedule math, model training, guidance, metrics and
/// dataset handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step index {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid attribute index {index} (have {count})")]
    InvalidAttribute { index: usize, count: usize },

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("idx format error: {0}")]
    IdxFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

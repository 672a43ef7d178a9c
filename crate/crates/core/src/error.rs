use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite result: {0}")]
    Numeric(String),

    #[error("match state has not absorbed any frame")]
    EmptyState,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sequence generation failed: {0}")]
    Generation(String),

    /// Raised before any buffer is allocated when the expected-bytes
    /// estimate of a benchmark configuration exceeds the memory cap.
    #[error(
        "refusing to run: predicted {predicted} accounted bytes exceeds cap of {cap} bytes (OOM)"
    )]
    PredictedOom { predicted: u64, cap: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

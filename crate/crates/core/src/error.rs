use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth: {0}")]
    InvalidDepth(f64),
    #[error("object center {0:?} is outside the image")]
    OutOfView([f64; 2]),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("empty point set")]
    EmptyPointSet,
    #[error("accuracy is undefined for an empty error list")]
    UndefinedAccuracy,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

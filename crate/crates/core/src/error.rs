//! Shared error type for the engine and battery.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("index out of range: {index} (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model format error at layer {layer}: {message}")]
    ModelFormat { layer: usize, message: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("degenerate sampling: {0}")]
    DegenerateSampling(String),

    #[error("singular linear system")]
    SingularSystem,

    #[error("saliency method error: {0}")]
    Method(String),

    #[error("card error: {0}")]
    Card(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

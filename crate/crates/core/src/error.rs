use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{func}: argument {arg} outside the domain")]
    Domain { func: &'static str, arg: f64 },

    #[error("invalid Dirichlet parameters: {0}")]
    InvalidDirichlet(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("probability saturated: {0}")]
    Saturation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Divergence {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("unknown suite `{0}`")]
    UnknownSuite(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("unsupported model version `{0}`")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

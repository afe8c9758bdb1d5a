use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("label {label} at flat index {index} is outside [0, {num_classes})")]
    ClassOutOfRange { label: i64, index: usize, num_classes: usize },

    #[error("downsample factor {factor} exceeds map size {height}x{width}")]
    FactorTooLarge { factor: usize, height: usize, width: usize },

    #[error("region side {side} exceeds map size {height}x{width}")]
    RegionTooLarge { side: usize, height: usize, width: usize },

    #[error("no region points left for image {batch}, class {class} after ignore filtering")]
    EmptyDistribution { batch: usize, class: usize },

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("dimension {0} too large for brute-force evaluation (max 4)")]
    DimTooLarge(usize),

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("invalid config `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { field, reason: reason.into() }
    }

    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch { expected: expected.to_vec(), actual: actual.to_vec() }
    }
}

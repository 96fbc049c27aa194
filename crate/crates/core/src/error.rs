use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("proximity budget must be at least 1")]
    ZeroProximity,
    #[error("budget `{field}` must be non-negative, got {value}")]
    NegativeBudget { field: &'static str, value: i64 },
    #[error("head dimension must be positive")]
    ZeroHeadDim,
    #[error("decay must lie in [0, 1], got {0}")]
    DecayOutOfRange(f64),
    #[error("compensation must lie in (0, 1], got {0}")]
    CompensationOutOfRange(f64),
    #[error("non-finite value at component {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty input")]
    Empty,
    #[error("keys and values differ in length ({keys} vs {values})")]
    LengthMismatch { keys: usize, values: usize },
    #[error("fusion count must be at least 1")]
    ZeroFusionCount,
    #[error("negative attention weight {weight} for entry {id}")]
    NegativeWeight { id: u64, weight: f64 },
    #[error("entry {0} is not registered with the score tracker")]
    UnknownEntry(u64),
    #[error("invalid policy parameter: {0}")]
    InvalidPolicy(String),
    #[error("reference vector has zero norm")]
    ZeroNormReference,
    #[error("invalid trace parameter: {0}")]
    InvalidTrace(String),
}

use thiserror::Error;

/// Crate-wide error type.
///
/// The variants are grouped by which stage of a run they can abort:
/// configuration checks, data ingestion and validation, numerical
/// routines, and I/O. The CLI maps these groups onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied option is outside its documented domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// The input data violate a structural requirement of the model.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// The data are structurally valid but too small for the requested
    /// estimator (for example no replicated blank measurements).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A calibration query is inconsistent with the training data.
    #[error("invalid query: {0}")]
    Query(String),

    /// A numerical routine failed beyond recovery (singular system,
    /// non-finite objective, no usable draws).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

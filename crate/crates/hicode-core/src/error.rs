use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of its documented domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// A raw code string could not be normalized.
    #[error("rejected code: {0}")]
    RejectedCode(String),

    /// Corpus ingestion failed (empty corpus, malformed line, ...).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A metric has no defined value on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Dataset ingestion failed (missing file, malformed row, unknown class).
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Episode sampling preconditions were not met.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// An index or coordinate was out of range.
    #[error("bounds error: {0}")]
    Bounds(String),

    /// Inputs disagree on shape or key set.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A model container could not be read or written.
    #[error("container error: {0}")]
    Container(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

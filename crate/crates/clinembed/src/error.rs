//! Error taxonomy shared across the library.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A computation produced a non-finite value (NaN or infinity).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (e.g. non-scalar loss, double normalization).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Input does not conform to the feature schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed or degenerate dataset.
    #[error("data error: {0}")]
    Data(String),

    /// Metric preconditions not met (e.g. single-class input).
    #[error("metric error: {0}")]
    Metric(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Contract(_) => 2,
            _ => 1,
        }
    }
}

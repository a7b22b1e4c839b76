//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; NaN/Inf, shape mismatches and
//! malformed files are reported explicitly instead of propagating silently.

use thiserror::Error;

/// All failure modes the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value (NaN/Inf) was produced where finiteness is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// State diverged during integration or training.
    #[error("divergence at {where_}: {detail}")]
    Divergence { where_: String, detail: String },

    /// Too few inputs to perform the operation.
    #[error("length error: {context} requires {required}, got {got}")]
    Length {
        context: String,
        required: usize,
        got: usize,
    },

    /// A binary file could not be parsed.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// File carries an unsupported format version.
    #[error("unsupported version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// A mixture component lost effectively all of its members.
    #[error("empty cluster: component {k} has weight mass {mass:.3e}")]
    EmptyCluster { k: usize, mass: f64 },

    /// A matrix required to be positive definite failed its Cholesky factorization.
    #[error("factorization error: {0}")]
    Factorization(String),

    /// A correlation or score is undefined for the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A linear system is singular (or numerically rank deficient).
    #[error("singular system: {0}")]
    Singular(String),

    /// Optimizer state and gradient set disagree.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

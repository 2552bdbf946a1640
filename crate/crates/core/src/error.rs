//! Shared error type for the library.

use std::path::PathBuf;

/// Errors surfaced by model evaluation, data handling, and the federation
/// engine.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// A caller passed inputs whose shapes do not match the model or each
    /// other.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation that needs at least one sample received none.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// A parameter is outside the mathematical domain of the formula.
    #[error("domain error: {0}")]
    Domain(String),

    /// A binary input (IDX file or dataset container) is malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// A partition plan is inconsistent with the environments it refers to.
    #[error("partition plan error: {0}")]
    Plan(String),

    /// An API contract was violated (bad weights, inconsistent setup, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared during training.
    #[error("numerical error at round {round}, client {client}: {detail}")]
    Numerical {
        round: usize,
        client: usize,
        detail: String,
    },

    /// The reference gradient norm fell below the floor used to guard the
    /// contribution denominator.
    #[error("degenerate gradient: squared norm below {floor:e}")]
    DegenerateGradient { floor: f64 },

    /// Pretraining excluded every client.
    #[error("empty cohort: no client scored above the exit threshold {threshold}")]
    EmptyCohort { threshold: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

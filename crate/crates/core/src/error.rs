//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OdefitError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Coincident particles make the pair potential singular.
    #[error("coincident particles {i} and {j} (zero separation)")]
    SingularPair { i: usize, j: usize },

    #[error("step budget exhausted at t = {t} (possible divergence)")]
    Divergence { t: f64 },

    #[error("solver produced a non-finite state at t = {t}")]
    Instability { t: f64 },

    /// The augmented state/sensitivity system blew up. Kept distinct from
    /// plain `Instability` so callers can tell which system failed.
    #[error("sensitivity integration unstable at t = {t}")]
    SensitivityInstability { t: f64 },

    #[error("step size underflow at t = {t} (h = {h:e}); problem may be stiff")]
    StepUnderflow { t: f64, h: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("dataset generation failed: {0}")]
    DatasetGeneration(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, OdefitError>;

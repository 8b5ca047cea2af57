//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("{name} must be symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { name: &'static str, asymmetry: f64 },

    #[error("{name} must be positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite {
        name: &'static str,
        min_eigenvalue: f64,
    },

    #[error("Riccati iteration did not converge within {iterations} iterations (residual {residual:.3e})")]
    DareNonConvergence { iterations: usize, residual: f64 },

    #[error("closed loop is not stable: spectral radius of A - BK is {spectral_radius}")]
    UnstableClosedLoop { spectral_radius: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("probability vector invalid: {0}")]
    InvalidProbability(String),

    #[error("hypothesis set radius must be positive, got {0}")]
    InvalidRadius(f64),

    #[error("learning-rate parameters must be positive (D = {d}, G = {g})")]
    InvalidSchedule { d: f64, g: f64 },

    #[error("prediction already recorded for step {t}")]
    DoubleRecord { t: usize },

    #[error("window starting at step {start} is not fully realized yet")]
    ImmatureWindow { start: usize },

    #[error("trace is incomplete: {0}")]
    IncompleteTrace(String),

    #[error("trace/replay seed mismatch: trace has {expected}, replay got {found}")]
    SeedMismatch { expected: u64, found: u64 },

    #[error("no fixture record for request digest {digest}")]
    FixtureMiss { digest: String },

    #[error("classification service error: {0}")]
    Service(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("degenerate correlation: |rho| = {0} >= 1")]
    DegenerateCorrelation(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range 0..{len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// Lloyd-Max design stalled; `last_levels` is the final iterate.
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    Convergence {
        iterations: usize,
        last_change: f64,
        last_levels: Vec<f64>,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("test-point set rejected: {0}")]
    CandidateRejected(String),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("deployment failure: {0}")]
    Deployment(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, Error>;

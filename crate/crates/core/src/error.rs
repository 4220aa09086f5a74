use thiserror::Error;

use crate::nlp::PrimalDualPoint;

/// Failure modes shared by the solvers and the experiment harness.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SolverError {
    #[error("singular KKT system (reciprocal condition {rcond:.3e})")]
    SingularKkt { rcond: f64 },

    #[error("penalty loop did not terminate after {doublings} increases")]
    PenaltyLoopDiverged { doublings: usize },

    #[error("line search failed: stepsize fell to {alpha:.3e}")]
    LineSearchFailed { alpha: f64 },

    #[error("batch size {requested:.3e} exceeds cap {cap}")]
    BatchExplosion { requested: f64, cap: f64 },

    #[error("iterate left the finite region (norm {norm:.3e})")]
    Blowup { norm: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
}

impl SolverError {
    /// Short machine-readable tag used in experiment output.
    pub fn tag(&self) -> &'static str {
        match self {
            SolverError::SingularKkt { .. } => "singular_kkt",
            SolverError::PenaltyLoopDiverged { .. } => "penalty_diverged",
            SolverError::LineSearchFailed { .. } => "line_search_failed",
            SolverError::BatchExplosion { .. } => "batch_explosion",
            SolverError::Blowup { .. } => "blowup",
            SolverError::Dimension(_) => "dimension",
            SolverError::InvalidConfig(_) => "invalid_config",
            SolverError::UnknownProblem(_) => "unknown_problem",
        }
    }
}

/// A solver run that stopped on an error, with the iterate it had reached.
#[derive(Debug, Clone, Error)]
#[error("iteration {iteration}: {error}")]
pub struct SolveFailure {
    pub iteration: usize,
    pub error: SolverError,
    pub last: PrimalDualPoint,
    /// Samples consumed before the failure (zero for deterministic runs).
    pub samples_drawn: u128,
}

pub type Result<T, E = SolverError> = std::result::Result<T, E>;

//! Termination rule shared by every solver run in the experiment protocol.

use serde::{Deserialize, Serialize};

/// Threshold applied to both the step norm and the true KKT residual.
pub const PROTOCOL_THRESHOLD: f64 = 1e-4;
/// Iteration budget of one protocol run.
pub const PROTOCOL_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Converged,
    Diverged,
}

/// Converged once `min(alpha * |(dx, dlambda)|, |grad L|) <= 1e-4`; diverged
/// once `k >= max_iter`.
pub fn stopping_check(
    alpha_times_dir_norm: f64,
    true_kkt_norm: f64,
    k: usize,
    max_iter: usize,
) -> StopDecision {
    StoppingRule {
        threshold: PROTOCOL_THRESHOLD,
        max_iter,
    }
    .check(alpha_times_dir_norm, true_kkt_norm, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub threshold: f64,
    pub max_iter: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            threshold: PROTOCOL_THRESHOLD,
            max_iter: PROTOCOL_MAX_ITER,
        }
    }
}

impl StoppingRule {
    pub fn check(&self, alpha_times_dir_norm: f64, true_kkt_norm: f64, k: usize) -> StopDecision {
        if alpha_times_dir_norm.min(true_kkt_norm) <= self.threshold {
            StopDecision::Converged
        } else if k >= self.max_iter {
            StopDecision::Diverged
        } else {
            StopDecision::Continue
        }
    }
}

/// How a run that did not error out ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    IterationLimit,
}

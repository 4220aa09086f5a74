//! Deterministic SQP with an adaptive penalty loop and backtracking Armijo
//! line search on the exact augmented Lagrangian.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolveFailure, SolverError};
use crate::kkt::{compute_direction, SearchDirection, DEFAULT_RCOND_MIN};
use crate::merit::{MeritParams, SecondOrderBundle};
use crate::nlp::{EqualityProblem, PointEval, PrimalDualPoint};
use crate::stopping::SolveStatus;

/// Smallest stepsize the backtracking search will try.
pub const MIN_STEPSIZE: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// `B = I`.
    Identity,
    /// Lagrangian Hessian shifted just enough for the reduced Hessian to be
    /// at least `reduced_hessian_floor`.
    ExactRegularized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetSqpConfig {
    pub nu: f64,
    pub mu0: f64,
    pub delta0: f64,
    pub rho: f64,
    pub beta: f64,
    pub alpha_init: f64,
    pub backtrack_factor: f64,
    pub tol_kkt: f64,
    /// Optional step-norm tolerance on `alpha * |(dx, dlambda)|`.
    pub tol_step: Option<f64>,
    pub max_iter: usize,
    pub max_penalty_doublings: usize,
    pub hessian_mode: HessianMode,
    pub reduced_hessian_floor: f64,
    pub rcond_min: f64,
}

impl Default for DetSqpConfig {
    fn default() -> Self {
        Self {
            nu: 1e-3,
            mu0: 1.0,
            delta0: 1.0,
            rho: 2.0,
            beta: 0.3,
            alpha_init: 1.0,
            backtrack_factor: 0.5,
            tol_kkt: 1e-8,
            tol_step: None,
            max_iter: 500,
            max_penalty_doublings: 60,
            hessian_mode: HessianMode::Identity,
            reduced_hessian_floor: 1e-6,
            rcond_min: DEFAULT_RCOND_MIN,
        }
    }
}

impl DetSqpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SolverError::InvalidConfig(what.to_owned()));
        if !(self.nu > 0.0) {
            return bad("nu must be positive");
        }
        if !(self.mu0 > 0.0 && self.delta0 > 0.0) {
            return bad("mu0 and delta0 must be positive");
        }
        if !(self.rho > 1.0) {
            return bad("rho must exceed 1");
        }
        if !(self.beta > 0.0 && self.beta < 0.5) {
            return bad("beta must lie in (0, 0.5)");
        }
        if !(self.alpha_init > 0.0) {
            return bad("alpha_init must be positive");
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return bad("backtrack_factor must lie in (0, 1)");
        }
        if !(self.tol_kkt >= 0.0) {
            return bad("tol_kkt must be nonnegative");
        }
        Ok(())
    }
}

/// One accepted iteration of the deterministic solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DetIterationRecord {
    pub k: usize,
    pub kkt_norm: f64,
    /// Penalty pair after the penalty loop of this iteration.
    pub mu: f64,
    pub delta: f64,
    pub alpha: f64,
    /// Merit value at the iterate, and at the accepted trial point, both with this iteration's `mu`.
    pub merit: f64,
    pub merit_next: f64,
    pub dir_norm: f64,
    pub dir_deriv: f64,
    pub point: PrimalDualPoint,
}

#[derive(Debug, Clone)]
pub struct DetSolution {
    pub point: PrimalDualPoint,
    pub final_kkt: f64,
    pub trace: Vec<DetIterationRecord>,
    pub status: SolveStatus,
}

/// Outcome of the penalty loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyUpdate {
    pub mu: f64,
    pub delta: f64,
    pub doublings: usize,
    /// Merit directional derivative at the returned `mu`.
    pub dir_deriv: f64,
}

/// Hessian approximation `B` for the KKT system at the current point.
pub fn hessian_approximation(
    mode: HessianMode,
    bundle: &SecondOrderBundle,
    jac: &DMatrix<f64>,
    floor: f64,
) -> DMatrix<f64> {
    let d = jac.ncols();
    match mode {
        HessianMode::Identity => DMatrix::identity(d, d),
        HessianMode::ExactRegularized => {
            let h = &bundle.hess_l;
            let min_eig = reduced_min_eigenvalue(h, jac);
            if min_eig >= floor {
                h.clone()
            } else {
                h + DMatrix::identity(d, d) * (floor - min_eig)
            }
        }
    }
}

/// Smallest eigenvalue of `Z^T H Z`, `Z` an orthonormal null-space basis of `jac`.
fn reduced_min_eigenvalue(h: &DMatrix<f64>, jac: &DMatrix<f64>) -> f64 {
    let (m, d) = jac.shape();
    if m >= d {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(jac.tr_mul(jac));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let z = DMatrix::from_columns(
        &order[..d - m]
            .iter()
            .map(|&i| eig.eigenvectors.column(i))
            .collect::<Vec<_>>(),
    );
    let reduced = z.tr_mul(&(h * &z));
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    SymmetricEigen::new(reduced)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Raises `(mu, delta) -> (mu rho^j, delta / rho^j)` for the smallest `j >= 0`
/// with `grad L_{mu,nu}^T (dx, dlambda) <= -delta (|dx|^2 + |G grad_x L|^2)`.
///
/// The derivative is affine in `mu`; only its `mu (G^T c)^T dx` term is
/// recomputed per trial.
#[allow(clippy::too_many_arguments)]
pub(crate) fn penalty_loop_at(
    eval: &PointEval,
    direction: &SearchDirection,
    bundle: &SecondOrderBundle,
    mu: f64,
    delta: f64,
    rho: f64,
    nu: f64,
    max_doublings: usize,
) -> Result<PenaltyUpdate> {
    let params = MeritParams { mu, nu };
    let grad = eval.merit_gradient(params, bundle);
    let base = grad.dot(&direction.stacked());
    let slope = eval.jac.tr_mul(&eval.c).dot(&direction.dx);
    let g_grad_sq = (&eval.jac * &bundle.grad_l).norm_squared();
    let scale = direction.dx.norm_squared() + g_grad_sq;

    let (mut mu_j, mut delta_j) = (mu, delta);
    for j in 0..=max_doublings {
        let dir_deriv = base + (mu_j - mu) * slope;
        if dir_deriv <= -delta_j * scale {
            return Ok(PenaltyUpdate {
                mu: mu_j,
                delta: delta_j,
                doublings: j,
                dir_deriv,
            });
        }
        mu_j *= rho;
        delta_j /= rho;
    }
    Err(SolverError::PenaltyLoopDiverged {
        doublings: max_doublings,
    })
}

/// Penalty loop of the deterministic method; see [`penalty_loop_at`].
#[allow(clippy::too_many_arguments)]
pub fn penalty_while_loop(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    direction: &SearchDirection,
    bundle: &SecondOrderBundle,
    mu: f64,
    delta: f64,
    rho: f64,
    nu: f64,
    max_doublings: usize,
) -> Result<PenaltyUpdate> {
    penalty_loop_at(
        &PointEval::new(problem, &p.x),
        direction,
        bundle,
        mu,
        delta,
        rho,
        nu,
        max_doublings,
    )
}

/// Accepted stepsize and the merit value at the accepted point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoStep {
    pub alpha: f64,
    pub merit_trial: f64,
    pub trials: usize,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn armijo_search(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    merit_now: f64,
    direction: &SearchDirection,
    params: MeritParams,
    beta: f64,
    alpha_init: f64,
    backtrack_factor: f64,
    dir_deriv: f64,
) -> Result<ArmijoStep> {
    let mut alpha = alpha_init;
    let mut trials = 0;
    while alpha >= MIN_STEPSIZE {
        trials += 1;
        let trial = p.stepped(alpha, &direction.dx, &direction.dlambda);
        let value = PointEval::new(problem, &trial.x).merit_value(&trial.lambda, params);
        if value <= merit_now + alpha * beta * dir_deriv {
            return Ok(ArmijoStep {
                alpha,
                merit_trial: value,
                trials,
            });
        }
        alpha *= backtrack_factor;
    }
    Err(SolverError::LineSearchFailed { alpha })
}

/// First `alpha` in `alpha_init * backtrack_factor^j` satisfying the Armijo
/// condition on the merit function.
#[allow(clippy::too_many_arguments)]
pub fn armijo_backtrack(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    direction: &SearchDirection,
    params: MeritParams,
    beta: f64,
    alpha_init: f64,
    backtrack_factor: f64,
    dir_deriv: f64,
) -> Result<f64> {
    let merit_now = PointEval::new(problem, &p.x).merit_value(&p.lambda, params);
    armijo_search(
        problem,
        p,
        merit_now,
        direction,
        params,
        beta,
        alpha_init,
        backtrack_factor,
        dir_deriv,
    )
    .map(|s| s.alpha)
}

/// Runs the deterministic SQP until the KKT residual drops to `tol_kkt`
/// (or the optional step-norm tolerance triggers) or `max_iter` is reached.
pub fn solve_deterministic(
    problem: &dyn EqualityProblem,
    start: &PrimalDualPoint,
    config: &DetSqpConfig,
) -> Result<DetSolution, SolveFailure> {
    let fail = |iteration: usize, error: SolverError, last: &PrimalDualPoint| SolveFailure {
        iteration,
        error,
        last: last.clone(),
        samples_drawn: 0,
    };
    config.validate().map_err(|e| fail(0, e, start))?;
    start.check_dims(problem).map_err(|e| fail(0, e, start))?;

    let mut p = start.clone();
    let (mut mu, mut delta) = (config.mu0, config.delta0);
    let mut trace = Vec::new();
    let mut k = 0;
    loop {
        let eval = PointEval::new(problem, &p.x);
        let kkt = eval.kkt_residual(&p.lambda);
        if !kkt.is_finite() {
            return Err(fail(k, SolverError::Blowup { norm: p.norm() }, &p));
        }
        if kkt <= config.tol_kkt {
            return Ok(DetSolution {
                point: p,
                final_kkt: kkt,
                trace,
                status: SolveStatus::Converged,
            });
        }
        if k >= config.max_iter {
            return Ok(DetSolution {
                point: p,
                final_kkt: kkt,
                trace,
                status: SolveStatus::IterationLimit,
            });
        }

        let step = (|| {
            let bundle = eval.exact_bundle(&p.lambda);
            let b = hessian_approximation(
                config.hessian_mode,
                &bundle,
                &eval.jac,
                config.reduced_hessian_floor,
            );
            let dir = compute_direction(
                &b,
                &eval.jac,
                &bundle.grad_l,
                &eval.c,
                &bundle.m,
                config.rcond_min,
            )?;
            let pen = penalty_loop_at(
                &eval,
                &dir,
                &bundle,
                mu,
                delta,
                config.rho,
                config.nu,
                config.max_penalty_doublings,
            )?;
            let params = MeritParams {
                mu: pen.mu,
                nu: config.nu,
            };
            let merit = eval.merit_value(&p.lambda, params);
            let ls = armijo_search(
                problem,
                &p,
                merit,
                &dir,
                params,
                config.beta,
                config.alpha_init,
                config.backtrack_factor,
                pen.dir_deriv,
            )?;
            Ok::<_, SolverError>((dir, pen, merit, ls))
        })();
        let (dir, pen, merit, ls) = step.map_err(|e| fail(k, e, &p))?;
        mu = pen.mu;
        delta = pen.delta;

        let dir_norm = dir.norm();
        trace.push(DetIterationRecord {
            k,
            kkt_norm: kkt,
            mu,
            delta,
            alpha: ls.alpha,
            merit,
            merit_next: ls.merit_trial,
            dir_norm,
            dir_deriv: pen.dir_deriv,
            point: p.clone(),
        });
        if config
            .tol_step
            .is_some_and(|tol| ls.alpha * dir_norm <= tol)
        {
            return Ok(DetSolution {
                point: p,
                final_kkt: kkt,
                trace,
                status: SolveStatus::Converged,
            });
        }
        p = p.stepped(ls.alpha, &dir.dx, &dir.dlambda);
        k += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{analytic_suite, kkt_residual, problem_by_name};

    fn direction_at(
        problem: &dyn EqualityProblem,
        p: &PrimalDualPoint,
    ) -> (PointEval, SecondOrderBundle, SearchDirection) {
        let eval = PointEval::new(problem, &p.x);
        let bundle = eval.exact_bundle(&p.lambda);
        let b = DMatrix::identity(problem.dim(), problem.dim());
        let dir = compute_direction(
            &b,
            &eval.jac,
            &bundle.grad_l,
            &eval.c,
            &bundle.m,
            DEFAULT_RCOND_MIN,
        )
        .unwrap();
        (eval, bundle, dir)
    }

    #[test]
    fn config_validation() {
        assert!(DetSqpConfig::default().validate().is_ok());
        let bad = DetSqpConfig {
            beta: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DetSqpConfig {
            rho: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn penalty_loop_keeps_satisfied_parameters() {
        let e = problem_by_name("quad_lin").unwrap();
        let (eval, bundle, dir) = direction_at(e.problem.as_ref(), &e.start);
        let up = penalty_loop_at(&eval, &dir, &bundle, 1e6, 1e-9, 2.0, 1e-3, 60).unwrap();
        assert_eq!((up.mu, up.delta, up.doublings), (1e6, 1e-9, 0));
    }

    #[test]
    fn penalty_loop_feasible_point_needs_no_increase() {
        // c = 0 and B = I: the derivative is -|dx|^2 - nu |G grad L|^2.
        let e = problem_by_name("sphere_linear").unwrap();
        let p = PrimalDualPoint::from_slices(&[0.6, 0.0, 0.8], &[0.2]);
        let (eval, bundle, dir) = direction_at(e.problem.as_ref(), &p);
        assert!(eval.c.norm() < 1e-15);
        let nu = 0.25;
        let up = penalty_loop_at(&eval, &dir, &bundle, 1.0, nu, 2.0, nu, 60).unwrap();
        assert_eq!(up.doublings, 0);
        assert_eq!(up.mu, 1.0);
    }

    #[test]
    fn penalty_loop_matches_brute_force_scan() {
        for e in analytic_suite() {
            let prob = e.problem.as_ref();
            let (eval, bundle, dir) = direction_at(prob, &e.start);
            let (mu0, delta0, rho, nu) = (1e-3, 1.0, 1.5, 1e-3);
            let up = penalty_loop_at(&eval, &dir, &bundle, mu0, delta0, rho, nu, 60).unwrap();
            // scan j with a full merit-gradient evaluation per candidate
            let scale = dir.dx.norm_squared() + (&eval.jac * &bundle.grad_l).norm_squared();
            let first = (0..=20)
                .find(|&j| {
                    let mu = mu0 * rho.powi(j);
                    let delta = delta0 / rho.powi(j);
                    let g = eval.merit_gradient(MeritParams { mu, nu }, &bundle);
                    g.dot(&dir.stacked()) <= -delta * scale
                })
                .expect("scan finds an exit");
            assert_eq!(up.doublings, first as usize, "{}", prob.name());
        }
    }

    #[test]
    fn armijo_accepts_unit_step_near_quadratic_solution() {
        let e = problem_by_name("quad_lin").unwrap();
        let prob = e.problem.as_ref();
        let mut p = e.reference.point.clone();
        p.x[0] += 0.05;
        let eval = PointEval::new(prob, &p.x);
        let bundle = eval.exact_bundle(&p.lambda);
        let dir = compute_direction(
            &bundle.hess_l,
            &eval.jac,
            &bundle.grad_l,
            &eval.c,
            &bundle.m,
            DEFAULT_RCOND_MIN,
        )
        .unwrap();
        let pen = penalty_loop_at(&eval, &dir, &bundle, 1.0, 1e-3, 2.0, 1e-3, 60).unwrap();
        let params = MeritParams {
            mu: pen.mu,
            nu: 1e-3,
        };
        let alpha = armijo_backtrack(prob, &p, &dir, params, 0.3, 1.0, 0.5, pen.dir_deriv).unwrap();
        assert_eq!(alpha, 1.0);
    }

    #[test]
    fn armijo_result_is_valid_and_minimal() {
        let e = problem_by_name("poly5").unwrap();
        let prob = e.problem.as_ref();
        let p = PrimalDualPoint::from_slices(&[-1.5, 2.0, 0.3, -1.0, 1.8], &[1.0, -2.0]);
        let (eval, bundle, dir) = direction_at(prob, &p);
        let pen = penalty_loop_at(&eval, &dir, &bundle, 1.0, 1.0, 2.0, 1e-3, 60).unwrap();
        assert!(pen.dir_deriv < 0.0);
        let params = MeritParams {
            mu: pen.mu,
            nu: 1e-3,
        };
        let (beta, factor) = (0.3, 0.5);
        let alpha =
            armijo_backtrack(prob, &p, &dir, params, beta, 1.0, factor, pen.dir_deriv).unwrap();
        let merit = |q: &PrimalDualPoint| crate::merit::merit_value(prob, q, params);
        let base = merit(&p);
        let accepted = p.stepped(alpha, &dir.dx, &dir.dlambda);
        assert!(merit(&accepted) <= base + alpha * beta * pen.dir_deriv);
        assert!(alpha < 1.0, "expected backtracking far from the solution");
        let prev = alpha / factor;
        let rejected = p.stepped(prev, &dir.dx, &dir.dlambda);
        assert!(merit(&rejected) > base + prev * beta * pen.dir_deriv);
    }

    #[test]
    fn converges_on_hs6_from_standard_start() {
        let e = problem_by_name("hs6").unwrap();
        let sol =
            solve_deterministic(e.problem.as_ref(), &e.start, &DetSqpConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.final_kkt <= 1e-8);
        assert!(sol.point.distance(&e.reference.point) < 1e-6);
    }

    #[test]
    fn start_at_solution_stops_immediately() {
        for e in analytic_suite() {
            let sol = solve_deterministic(
                e.problem.as_ref(),
                &e.reference.point,
                &DetSqpConfig::default(),
            )
            .unwrap();
            assert_eq!(sol.status, SolveStatus::Converged);
            assert!(sol.trace.len() <= 1);
        }
    }

    #[test]
    fn trace_invariants_and_determinism() {
        for e in analytic_suite() {
            let prob = e.problem.as_ref();
            let cfg = DetSqpConfig::default();
            let a = solve_deterministic(prob, &e.start, &cfg).unwrap();
            let b = solve_deterministic(prob, &e.start, &cfg).unwrap();
            assert_eq!(a.trace, b.trace, "{}", prob.name());
            for w in a.trace.windows(2) {
                assert!(w[1].mu >= w[0].mu);
                assert!(w[1].delta <= w[0].delta);
            }
            for r in &a.trace {
                assert!(r.dir_deriv < 0.0);
                assert!(r.merit_next <= r.merit + r.alpha * cfg.beta * r.dir_deriv);
            }
            assert!((kkt_residual(prob, &a.point) - a.final_kkt).abs() <= 1e-15);
        }
    }

    #[test]
    fn regularized_hessian_has_positive_reduced_curvature() {
        let e = problem_by_name("poly5").unwrap();
        let p = PrimalDualPoint::from_slices(&[-1.5, 2.0, 0.3, -1.0, 1.8], &[1.0, -2.0]);
        let eval = PointEval::new(e.problem.as_ref(), &p.x);
        let bundle = eval.exact_bundle(&p.lambda);
        let b = hessian_approximation(HessianMode::ExactRegularized, &bundle, &eval.jac, 1e-6);
        assert!(reduced_min_eigenvalue(&b, &eval.jac) >= 1e-6 - 1e-9);
    }
}

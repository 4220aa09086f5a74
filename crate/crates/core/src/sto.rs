//! Stochastic SQP: the non-adaptive variant with prescribed stepsizes and the
//! adaptive variant with batch-size selection and a stochastic line search on
//! the augmented Lagrangian.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolveFailure, SolverError};
use crate::kkt::{SearchDirection, DEFAULT_RCOND_MIN};
use crate::merit::{merit_gradient_parts, MeritParams, SecondOrderBundle};
use crate::nlp::{EqualityProblem, PointEval, PrimalDualPoint};
use crate::oracle::{
    draw_derivatives, stochastic_direction, BatchNoise, BatchSize, FunctionPair, NoiseModel,
    Purpose, RunStreams, SamplingMode,
};
use crate::stopping::{SolveStatus, StopDecision, StoppingRule};

/// Iterates whose norm exceeds this are treated as diverged.
pub const DEFAULT_BLOWUP_NORM: f64 = 1e10;

/// Prescribed stepsizes `alpha_k` of the non-adaptive method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `alpha_k = (k + 1)^(-p)`, so the first step is 1.
    PowerDecay(f64),
}

impl StepSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::PowerDecay(p) => ((k + 1) as f64).powf(-p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (StepSchedule::Constant(v) | StepSchedule::PowerDecay(v)) = *self;
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(SolverError::InvalidConfig(format!(
                "schedule parameter must be positive, got {v}"
            )))
        }
    }
}

impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSchedule::Constant(a) => write!(f, "const:{a}"),
            StepSchedule::PowerDecay(p) => write!(f, "pow:{p}"),
        }
    }
}

impl FromStr for StepSchedule {
    type Err = SolverError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            SolverError::InvalidConfig(format!(
                "bad schedule {s:?}, expected const:<alpha> or pow:<p>"
            ))
        };
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let schedule = match kind.trim() {
            "const" => StepSchedule::Constant(value),
            "pow" => StepSchedule::PowerDecay(value),
            _ => return Err(bad()),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

impl Serialize for StepSchedule {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StepSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonAdaptConfig {
    pub schedule: StepSchedule,
    pub max_iter: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Realizations per gradient draw and per Hessian draw.
    pub batch_size: BatchSize,
    pub stop_threshold: f64,
    pub blowup_norm: f64,
    pub rcond_min: f64,
}

impl Default for NonAdaptConfig {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::PowerDecay(0.6),
            max_iter: crate::stopping::PROTOCOL_MAX_ITER,
            noise: NoiseModel::exact(),
            seed: 0,
            batch_size: 1,
            stop_threshold: crate::stopping::PROTOCOL_THRESHOLD,
            blowup_norm: DEFAULT_BLOWUP_NORM,
            rcond_min: DEFAULT_RCOND_MIN,
        }
    }
}

impl NonAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        NoiseModel::new(self.noise.sigma_sq)?;
        if self.batch_size == 0 {
            return Err(SolverError::InvalidConfig(
                "batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub nu: f64,
    pub gamma_rh: f64,
    /// Initial and maximal stepsize.
    pub alpha_max: f64,
    pub mu_bar0: f64,
    pub eps_bar0: f64,
    pub kappa_grad: f64,
    pub rho: f64,
    pub p_grad: f64,
    pub p_f: f64,
    pub beta: f64,
    pub kappa_f: f64,
    pub c_grad: f64,
    pub c_f: f64,
    pub max_iter: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    pub max_penalty_doublings: usize,
    pub batch_cap: f64,
    pub eps_floor: f64,
    pub stop_threshold: f64,
    pub blowup_norm: f64,
    pub rcond_min: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            nu: 1e-3,
            gamma_rh: 1e-3,
            alpha_max: 1.5,
            mu_bar0: 1.0,
            eps_bar0: 1.0,
            kappa_grad: 1.0,
            rho: 1.2,
            p_grad: 0.9,
            p_f: 0.9,
            beta: 0.3,
            kappa_f: 0.04,
            c_grad: 2.0,
            c_f: 2.0,
            max_iter: crate::stopping::PROTOCOL_MAX_ITER,
            noise: NoiseModel::exact(),
            seed: 0,
            max_penalty_doublings: 200,
            batch_cap: 1e30,
            eps_floor: 1e-300,
            stop_threshold: crate::stopping::PROTOCOL_THRESHOLD,
            blowup_norm: DEFAULT_BLOWUP_NORM,
            rcond_min: DEFAULT_RCOND_MIN,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(SolverError::InvalidConfig(what));
        if !(self.gamma_rh > 0.0 && self.nu >= self.gamma_rh) {
            return bad(format!(
                "need nu >= gamma_rh > 0, got nu={}, gamma_rh={}",
                self.nu, self.gamma_rh
            ));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.alpha_max > 0.0) {
            return bad(format!(
                "alpha_max must be positive, got {}",
                self.alpha_max
            ));
        }
        let kf_max = self.beta / (4.0 * self.alpha_max);
        if !(self.kappa_f > 0.0 && self.kappa_f < kf_max) {
            return bad(format!(
                "kappa_f must lie in (0, {kf_max}), got {}",
                self.kappa_f
            ));
        }
        if !(self.rho > 1.0) {
            return bad(format!("rho must exceed 1, got {}", self.rho));
        }
        for (name, p) in [("p_grad", self.p_grad), ("p_f", self.p_f)] {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {p}"));
            }
        }
        for (name, v) in [
            ("mu_bar0", self.mu_bar0),
            ("eps_bar0", self.eps_bar0),
            ("kappa_grad", self.kappa_grad),
            ("c_grad", self.c_grad),
            ("c_f", self.c_f),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.batch_cap >= 1.0) {
            return bad("batch_cap must be at least 1".into());
        }
        NoiseModel::new(self.noise.sigma_sq)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepClass {
    SuccessfulReliable,
    SuccessfulUnreliable,
    Unsuccessful,
}

impl StepClass {
    pub fn is_successful(self) -> bool {
        self != StepClass::Unsuccessful
    }
}

/// One iteration of either stochastic method.
///
/// `mu_bar`, `alpha_bar` and `eps_bar` are the values used during the
/// iteration; the non-adaptive method leaves the line-search fields at their
/// neutral values (`mu_bar` and `eps_bar` NaN, `batch_func` 0).
#[derive(Debug, Clone, PartialEq)]
pub struct StoIterationRecord {
    pub k: usize,
    pub kkt_norm: f64,
    pub mu_bar: f64,
    pub alpha_bar: f64,
    pub eps_bar: f64,
    pub batch_grad: BatchSize,
    pub batch_func: BatchSize,
    pub step_class: StepClass,
    /// `L_bar(x^k) - L_bar(x^{s_k})`.
    pub stoch_merit_decrease: f64,
    pub dir_deriv: f64,
    pub dir_norm: f64,
}

#[derive(Debug, Clone)]
pub struct StoSolution {
    pub point: PrimalDualPoint,
    pub final_kkt: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub trace: Vec<StoIterationRecord>,
    /// NaN for the non-adaptive method, which has no penalty parameter.
    pub final_mu: f64,
    pub samples_drawn: BatchSize,
}

fn check_blowup(p: &PrimalDualPoint, limit: f64) -> Result<()> {
    let norm = p.norm();
    if !p.is_finite() || !(norm <= limit) {
        return Err(SolverError::Blowup { norm });
    }
    Ok(())
}

/// Runs the non-adaptive method with independent gradient and Hessian draws
/// and the scheduled stepsizes.
pub fn solve_nonadaptive(
    problem: &dyn EqualityProblem,
    start: &PrimalDualPoint,
    config: &NonAdaptConfig,
) -> Result<StoSolution, SolveFailure> {
    let mut samples: BatchSize = 0;
    let fail = |iteration: usize,
                error: SolverError,
                last: &PrimalDualPoint,
                samples: BatchSize| SolveFailure {
        iteration,
        error,
        last: last.clone(),
        samples_drawn: samples,
    };
    config.validate().map_err(|e| fail(0, e, start, 0))?;
    start
        .check_dims(problem)
        .map_err(|e| fail(0, e, start, 0))?;
    let streams = RunStreams::new(config.seed);
    let rule = StoppingRule {
        threshold: config.stop_threshold,
        max_iter: config.max_iter,
    };
    let mut p = start.clone();
    let mut trace = Vec::new();
    let mut k = 0;
    loop {
        let eval = PointEval::new(problem, &p.x);
        let kkt = eval.kkt_residual(&p.lambda);
        let finish = |p: PrimalDualPoint, status, trace, samples| StoSolution {
            point: p,
            final_kkt: kkt,
            iterations: k,
            status,
            trace,
            final_mu: f64::NAN,
            samples_drawn: samples,
        };
        match rule.check(f64::INFINITY, kkt, k) {
            StopDecision::Converged => {
                return Ok(finish(p, SolveStatus::Converged, trace, samples))
            }
            StopDecision::Diverged => {
                return Ok(finish(p, SolveStatus::IterationLimit, trace, samples))
            }
            StopDecision::Continue => {}
        }

        let draw = draw_derivatives(
            &eval,
            &streams,
            k as u64,
            0,
            config.noise,
            config.batch_size,
            SamplingMode::Independent,
        );
        samples = samples.saturating_add(config.batch_size.saturating_mul(2));
        let grad_l = eval.lagrangian_gradient_with(&draw.grad.g_bar, &p.lambda);
        let bundle = eval.build_bundle(&p.lambda, &draw.hess.h_bar, &draw.hess.g_bar);
        let dir = stochastic_direction(&eval, &grad_l, &bundle, config.rcond_min)
            .map_err(|e| fail(k, e, &p, samples))?;

        let alpha = config.schedule.alpha(k);
        let dir_norm = dir.norm();
        if rule.check(alpha * dir_norm, kkt, k) == StopDecision::Converged {
            return Ok(finish(p, SolveStatus::Converged, trace, samples));
        }
        trace.push(StoIterationRecord {
            k,
            kkt_norm: kkt,
            mu_bar: f64::NAN,
            alpha_bar: alpha,
            eps_bar: f64::NAN,
            batch_grad: config.batch_size,
            batch_func: 0,
            step_class: StepClass::SuccessfulUnreliable,
            stoch_merit_decrease: f64::NAN,
            dir_deriv: f64::NAN,
            dir_norm,
        });
        p = p.stepped(alpha, &dir.dx, &dir.dlambda);
        check_blowup(&p, config.blowup_norm).map_err(|e| fail(k + 1, e, &p, samples))?;
        k += 1;
    }
}

/// Estimates accepted by the gradient batch loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub batch: BatchSize,
    /// Draws made before acceptance, including the accepted one.
    pub draws: u32,
    pub samples_drawn: BatchSize,
    /// Estimated Lagrangian gradient from the accepted batch.
    pub grad_l: DVector<f64>,
    /// Second-order quantities built from the same batch.
    pub bundle: SecondOrderBundle,
    /// Right-hand side of the batch test: `C log(8d/p) / (kappa^2 alpha^2 min(|v|^2, 1))`.
    pub threshold: f64,
}

/// The stacked vector `(grad_l + nu M G grad_l + G^T c, nu G G^T G grad_l)`.
pub fn batch_test_vector(
    eval: &PointEval,
    grad_l: &DVector<f64>,
    bundle: &SecondOrderBundle,
    nu: f64,
) -> DVector<f64> {
    let (d, m) = (grad_l.len(), eval.c.len());
    let g_grad = &eval.jac * grad_l;
    let primal = grad_l + &bundle.m * &g_grad * nu + eval.jac.tr_mul(&eval.c);
    let dual = &eval.jac * eval.jac.tr_mul(&g_grad) * nu;
    let mut v = DVector::zeros(d + m);
    v.rows_mut(0, d).copy_from(&primal);
    v.rows_mut(d, m).copy_from(&dual);
    v
}

/// `C_grad log(8 d / p_grad) / (kappa_grad^2 alpha^2 min(|v|^2, 1))`; infinite
/// when the denominator vanishes.
pub fn gradient_batch_threshold(
    v_norm_sq: f64,
    d: usize,
    alpha_bar: f64,
    config: &AdaptConfig,
) -> f64 {
    let denom = config.kappa_grad.powi(2) * alpha_bar.powi(2) * v_norm_sq.min(1.0);
    let num = config.c_grad * (8.0 * d as f64 / config.p_grad).ln();
    if denom > 0.0 {
        num / denom
    } else {
        f64::INFINITY
    }
}

/// Draws one batch for both gradient and Hessian estimates, growing it by
/// `rho` until it passes the batch test.
#[allow(clippy::too_many_arguments)]
pub fn gradient_batch_size(
    eval: &PointEval,
    lambda: &DVector<f64>,
    streams: &RunStreams,
    k: u64,
    alpha_bar: f64,
    start_batch: BatchSize,
    config: &AdaptConfig,
) -> Result<GradientBatch> {
    let d = eval.grad_f.len();
    let mut batch = start_batch.max(1);
    if batch as f64 > config.batch_cap {
        return Err(SolverError::BatchExplosion {
            requested: batch as f64,
            cap: config.batch_cap,
        });
    }
    let mut samples: BatchSize = 0;
    let mut trial: u32 = 0;
    loop {
        let draw = draw_derivatives(
            eval,
            streams,
            k,
            trial,
            config.noise,
            batch,
            SamplingMode::Shared,
        );
        samples = samples.saturating_add(batch);
        let grad_l = eval.lagrangian_gradient_with(&draw.grad.g_bar, lambda);
        let bundle = eval.build_bundle(lambda, &draw.hess.h_bar, &draw.hess.g_bar);
        let v = batch_test_vector(eval, &grad_l, &bundle, config.nu);
        let threshold = gradient_batch_threshold(v.norm_squared(), d, alpha_bar, config);
        if batch as f64 >= threshold {
            return Ok(GradientBatch {
                batch,
                draws: trial + 1,
                samples_drawn: samples,
                grad_l,
                bundle,
                threshold,
            });
        }
        let next = (config.rho * batch as f64).ceil();
        if next > config.batch_cap {
            return Err(SolverError::BatchExplosion {
                requested: next,
                cap: config.batch_cap,
            });
        }
        batch = (next as BatchSize).max(batch + 1);
        trial += 1;
    }
}

/// `ceil(C_f log(4/p_f) / min((kappa_f alpha^2 D)^2, eps^2, 1))`.
pub fn function_batch_size(
    dir_deriv: f64,
    alpha_bar: f64,
    eps_bar: f64,
    config: &AdaptConfig,
) -> Result<BatchSize> {
    let accuracy = (config.kappa_f * alpha_bar.powi(2) * dir_deriv.abs()).powi(2);
    let denom = accuracy.min(eps_bar.powi(2)).min(1.0);
    let requested = (config.c_f * (4.0 / config.p_f).ln() / denom).ceil();
    if !(requested <= config.batch_cap) {
        return Err(SolverError::BatchExplosion {
            requested,
            cap: config.batch_cap,
        });
    }
    Ok(requested as BatchSize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoPenaltyUpdate {
    pub mu: f64,
    pub doublings: usize,
    /// `grad_bar L_{mu,nu}^T (dx, dlambda)` at the returned `mu`.
    pub dir_deriv: f64,
    /// Estimated merit gradient at the returned `mu`.
    pub merit_grad: DVector<f64>,
}

/// Smallest `mu_bar rho^j` for which the estimated merit gradient gives
/// decrease `-(gamma_rh/2)(|dx|^2 + |G grad_l|^2)` along the direction and
/// `|c| <= |grad_bar L_{mu,nu}|`.
pub fn penalty_loop_stochastic(
    eval: &PointEval,
    grad_l: &DVector<f64>,
    bundle: &SecondOrderBundle,
    direction: &SearchDirection,
    mu_bar: f64,
    config: &AdaptConfig,
) -> Result<StoPenaltyUpdate> {
    let stacked = direction.stacked();
    let c_norm = eval.c.norm();
    let required =
        0.5 * config.gamma_rh * (direction.dx.norm_squared() + (&eval.jac * grad_l).norm_squared());
    let mut mu = mu_bar;
    for j in 0..=config.max_penalty_doublings {
        let merit_grad = merit_gradient_parts(
            &eval.c,
            &eval.jac,
            grad_l,
            &bundle.m,
            MeritParams { mu, nu: config.nu },
        );
        let dir_deriv = merit_grad.dot(&stacked);
        if dir_deriv <= -required && c_norm <= merit_grad.norm() {
            return Ok(StoPenaltyUpdate {
                mu,
                doublings: j,
                dir_deriv,
                merit_grad,
            });
        }
        mu *= config.rho;
    }
    Err(SolverError::PenaltyLoopDiverged {
        doublings: config.max_penalty_doublings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    pub next: PrimalDualPoint,
    pub alpha_bar: f64,
    pub eps_bar: f64,
    pub class: StepClass,
}

/// Stochastic Armijo test and the stepsize / reliability updates.
#[allow(clippy::too_many_arguments)]
pub fn line_search_step(
    current: &PrimalDualPoint,
    trial: &PrimalDualPoint,
    merit_now: f64,
    merit_trial: f64,
    dir_deriv: f64,
    alpha_bar: f64,
    eps_bar: f64,
    config: &AdaptConfig,
) -> LineSearchOutcome {
    let predicted = alpha_bar * config.beta * dir_deriv;
    if merit_trial <= merit_now + predicted {
        let alpha_next = (config.rho * alpha_bar).min(config.alpha_max);
        let (eps_next, class) = if -predicted >= eps_bar {
            (config.rho * eps_bar, StepClass::SuccessfulReliable)
        } else {
            (eps_bar / config.rho, StepClass::SuccessfulUnreliable)
        };
        LineSearchOutcome {
            next: trial.clone(),
            alpha_bar: alpha_next,
            eps_bar: eps_next,
            class,
        }
    } else {
        LineSearchOutcome {
            next: current.clone(),
            alpha_bar: alpha_bar / config.rho,
            eps_bar: eps_bar / config.rho,
            class: StepClass::Unsuccessful,
        }
    }
}

/// Runs the adaptive method: batch selection, direction, penalty loop,
/// merit estimation on a common batch and the stochastic line search.
pub fn solve_adaptive(
    problem: &dyn EqualityProblem,
    start: &PrimalDualPoint,
    config: &AdaptConfig,
) -> Result<StoSolution, SolveFailure> {
    let mut samples: BatchSize = 0;
    let fail = |iteration: usize,
                error: SolverError,
                last: &PrimalDualPoint,
                samples: BatchSize| SolveFailure {
        iteration,
        error,
        last: last.clone(),
        samples_drawn: samples,
    };
    config.validate().map_err(|e| fail(0, e, start, 0))?;
    start
        .check_dims(problem)
        .map_err(|e| fail(0, e, start, 0))?;
    let streams = RunStreams::new(config.seed);
    let rule = StoppingRule {
        threshold: config.stop_threshold,
        max_iter: config.max_iter,
    };

    let mut p = start.clone();
    let mut alpha_bar = config.alpha_max;
    let mut eps_bar = config.eps_bar0;
    let mut mu_bar = config.mu_bar0;
    let mut prev_batch: BatchSize = 0;
    let mut trace = Vec::new();
    let mut k = 0;
    let mut eval = PointEval::new(problem, &p.x);
    loop {
        let kkt = eval.kkt_residual(&p.lambda);
        let finish = |p: PrimalDualPoint, status, trace, samples| StoSolution {
            point: p,
            final_kkt: kkt,
            iterations: k,
            status,
            trace,
            final_mu: mu_bar,
            samples_drawn: samples,
        };
        match rule.check(f64::INFINITY, kkt, k) {
            StopDecision::Converged => {
                return Ok(finish(p, SolveStatus::Converged, trace, samples))
            }
            StopDecision::Diverged => {
                return Ok(finish(p, SolveStatus::IterationLimit, trace, samples))
            }
            StopDecision::Continue => {}
        }

        let step = (|| {
            let gb = gradient_batch_size(
                &eval,
                &p.lambda,
                &streams,
                k as u64,
                alpha_bar,
                prev_batch + 1,
                config,
            )?;
            samples = samples.saturating_add(gb.samples_drawn);
            let dir = stochastic_direction(&eval, &gb.grad_l, &gb.bundle, config.rcond_min)?;
            Ok::<_, SolverError>((gb, dir))
        })();
        let (gb, dir) = step.map_err(|e| fail(k, e, &p, samples))?;
        prev_batch = gb.batch;

        let dir_norm = dir.norm();
        if rule.check(alpha_bar * dir_norm, kkt, k) == StopDecision::Converged {
            return Ok(finish(p, SolveStatus::Converged, trace, samples));
        }

        let pen = penalty_loop_stochastic(&eval, &gb.grad_l, &gb.bundle, &dir, mu_bar, config)
            .map_err(|e| fail(k, e, &p, samples))?;
        mu_bar = pen.mu;

        if eps_bar < config.eps_floor {
            return Err(fail(
                k,
                SolverError::BatchExplosion {
                    requested: f64::INFINITY,
                    cap: config.batch_cap,
                },
                &p,
                samples,
            ));
        }
        let batch_func = function_batch_size(pen.dir_deriv, alpha_bar, eps_bar, config)
            .map_err(|e| fail(k, e, &p, samples))?;
        let trial = p.stepped(alpha_bar, &dir.dx, &dir.dlambda);
        let trial_eval = PointEval::new(problem, &trial.x);
        let noise = BatchNoise::draw(
            &mut streams.rng(k as u64, Purpose::Function, 0),
            config.noise,
            problem.dim(),
            batch_func,
        );
        samples = samples.saturating_add(batch_func);
        let pair = FunctionPair::from_noise(&noise, &eval, &trial_eval);
        let params = MeritParams {
            mu: mu_bar,
            nu: config.nu,
        };
        let merit_now = eval.stochastic_merit_value(&p.lambda, params, pair.f_x, &pair.g_x);
        let merit_trial =
            trial_eval.stochastic_merit_value(&trial.lambda, params, pair.f_trial, &pair.g_trial);

        let out = line_search_step(
            &p,
            &trial,
            merit_now,
            merit_trial,
            pen.dir_deriv,
            alpha_bar,
            eps_bar,
            config,
        );
        trace.push(StoIterationRecord {
            k,
            kkt_norm: kkt,
            mu_bar,
            alpha_bar,
            eps_bar,
            batch_grad: gb.batch,
            batch_func,
            step_class: out.class,
            stoch_merit_decrease: merit_now - merit_trial,
            dir_deriv: pen.dir_deriv,
            dir_norm,
        });
        alpha_bar = out.alpha_bar;
        eps_bar = out.eps_bar;
        if out.class.is_successful() {
            p = out.next;
            check_blowup(&p, config.blowup_norm).map_err(|e| fail(k + 1, e, &p, samples))?;
            eval = trial_eval;
        }
        k += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::compute_direction;
    use crate::nlp::{analytic_suite, problem_by_name};
    use nalgebra::DMatrix;

    fn cfg() -> AdaptConfig {
        AdaptConfig::default()
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!(
            "const:0.5".parse::<StepSchedule>().unwrap(),
            StepSchedule::Constant(0.5)
        );
        assert_eq!(
            "pow:0.6".parse::<StepSchedule>().unwrap(),
            StepSchedule::PowerDecay(0.6)
        );
        assert!("pow:-1".parse::<StepSchedule>().is_err());
        assert!("linear:2".parse::<StepSchedule>().is_err());
        let s = StepSchedule::PowerDecay(0.5);
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.alpha(3), 0.5);
        assert_eq!(s.to_string().parse::<StepSchedule>().unwrap(), s);
    }

    #[test]
    fn adapt_config_invariants() {
        assert!(cfg().validate().is_ok());
        assert!(AdaptConfig {
            gamma_rh: 0.01,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig {
            kappa_f: 0.06,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(AdaptConfig { rho: 1.0, ..cfg() }.validate().is_err());
        assert!(AdaptConfig { p_f: 1.0, ..cfg() }.validate().is_err());
        assert!(AdaptConfig { beta: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn gradient_threshold_examples() {
        let t = gradient_batch_threshold(1.0, 2, 1.0, &cfg());
        assert!((t - 2.0 * (160.0f64 / 9.0).ln()).abs() < 1e-12);
        assert!((t - 5.757).abs() < 2e-3);
        // clamp: any |v|^2 >= 1 gives the same threshold
        assert_eq!(
            gradient_batch_threshold(1e6, 2, 0.5, &cfg()),
            gradient_batch_threshold(1.0, 2, 0.5, &cfg())
        );
        assert_eq!(gradient_batch_threshold(0.0, 2, 1.0, &cfg()), f64::INFINITY);
    }

    #[test]
    fn gradient_batch_exact_oracle() {
        let e = problem_by_name("maratos").unwrap();
        let p = PrimalDualPoint::from_slices(&[0.3, 0.9], &[0.2]);
        let eval = PointEval::new(e.problem.as_ref(), &p.x);
        let c = cfg();
        let gb = gradient_batch_size(&eval, &p.lambda, &RunStreams::new(1), 0, 1.0, 1, &c).unwrap();
        let exact = eval.exact_bundle(&p.lambda);
        let v = batch_test_vector(&eval, &exact.grad_l, &exact, c.nu);
        let thr = gradient_batch_threshold(v.norm_squared(), 2, 1.0, &c);
        // the first ceil-rho batch sequence element reaching the threshold
        let mut b: u128 = 1;
        while (b as f64) < thr {
            b = ((c.rho * b as f64).ceil() as u128).max(b + 1);
        }
        assert_eq!(gb.batch, b);
        assert_eq!(gb.grad_l, exact.grad_l);
        assert!(gb.batch as f64 >= gb.threshold);
    }

    #[test]
    fn gradient_batch_respects_cap() {
        let e = problem_by_name("maratos").unwrap();
        let p = PrimalDualPoint::from_slices(&[0.3, 0.9], &[0.2]);
        let eval = PointEval::new(e.problem.as_ref(), &p.x);
        let c = AdaptConfig {
            batch_cap: 10.0,
            ..cfg()
        };
        let err =
            gradient_batch_size(&eval, &p.lambda, &RunStreams::new(1), 0, 1e-3, 1, &c).unwrap_err();
        assert!(matches!(err, SolverError::BatchExplosion { .. }));
    }

    #[test]
    fn function_batch_examples() {
        let c = cfg();
        // kappa_f alpha^2 |D| = 1
        let d = -1.0 / c.kappa_f;
        assert_eq!(function_batch_size(d, 1.0, 1.0, &c).unwrap(), 3);
        assert_eq!(function_batch_size(d * 10.0, 2.0, 5.0, &c).unwrap(), 3);
        let a = function_batch_size(d, 1.0, 1e-3, &c).unwrap();
        let b = function_batch_size(d, 1.0, 1e-4, &c).unwrap();
        let base = c.c_f * (4.0 / c.p_f).ln();
        assert_eq!(a, (base * 1e6).ceil() as u128);
        assert_eq!(b, (base * 1e8).ceil() as u128);
        assert!(((b as f64) / (a as f64) - 100.0).abs() < 1e-4);
        assert!(function_batch_size(d, 1.0, 1e-20, &c).is_err());
    }

    #[test]
    fn line_search_rules() {
        let c = cfg();
        let x = PrimalDualPoint::from_slices(&[0.0, 0.0], &[0.0]);
        let y = PrimalDualPoint::from_slices(&[1.0, 0.0], &[0.0]);
        let out = line_search_step(&x, &y, 1.0, 2.0, -1.0, 1.2, 0.6, &c);
        assert_eq!(out.class, StepClass::Unsuccessful);
        assert_eq!(out.next, x);
        assert!((out.alpha_bar - 1.0).abs() < 1e-15 && (out.eps_bar - 0.5).abs() < 1e-15);

        let out = line_search_step(&x, &y, 1.0, 0.0, -1.0, c.alpha_max, 0.1, &c);
        assert_eq!(out.class, StepClass::SuccessfulReliable);
        assert_eq!(out.next, y);
        assert_eq!(out.alpha_bar, c.alpha_max);
        assert!((out.eps_bar - 0.12).abs() < 1e-15);

        // -alpha beta D = 0.3 < eps = 0.5
        let out = line_search_step(&x, &y, 1.0, 0.0, -1.0, 1.0, 0.5, &c);
        assert_eq!(out.class, StepClass::SuccessfulUnreliable);
        assert!((out.alpha_bar - 1.2).abs() < 1e-15);
        assert!((out.eps_bar - 0.5 / 1.2).abs() < 1e-15);
    }

    #[test]
    fn line_search_matches_exact_armijo() {
        let e = problem_by_name("hs6").unwrap();
        let c = cfg();
        let params = MeritParams { mu: 10.0, nu: c.nu };
        let p = PrimalDualPoint::from_slices(&[0.5, 0.4], &[0.1]);
        let eval = PointEval::new(e.problem.as_ref(), &p.x);
        let bundle = eval.exact_bundle(&p.lambda);
        let dir = stochastic_direction(&eval, &bundle.grad_l, &bundle, DEFAULT_RCOND_MIN).unwrap();
        let dd = eval.merit_gradient(params, &bundle).dot(&dir.stacked());
        assert!(dd < 0.0);
        for alpha in [1.5, 1.0, 0.5, 0.1, 0.01] {
            let trial = p.stepped(alpha, &dir.dx, &dir.dlambda);
            let now = eval.merit_value(&p.lambda, params);
            let next =
                PointEval::new(e.problem.as_ref(), &trial.x).merit_value(&trial.lambda, params);
            let armijo = next <= now + alpha * c.beta * dd;
            for eps in [1e-4, 1e-2, 1.0] {
                let out = line_search_step(&p, &trial, now, next, dd, alpha, eps, &c);
                let expect = match (armijo, -alpha * c.beta * dd >= eps) {
                    (false, _) => StepClass::Unsuccessful,
                    (true, true) => StepClass::SuccessfulReliable,
                    (true, false) => StepClass::SuccessfulUnreliable,
                };
                assert_eq!(out.class, expect);
            }
        }
    }

    fn scratch_merit_grad(
        eval: &PointEval,
        grad_l: &DVector<f64>,
        m: &DMatrix<f64>,
        mu: f64,
        nu: f64,
    ) -> DVector<f64> {
        let g = &eval.jac;
        let gg = g * grad_l;
        let top = grad_l + nu * m * &gg + mu * g.transpose() * &eval.c;
        let bottom = &eval.c + nu * g * g.transpose() * &gg;
        DVector::from_iterator(
            top.len() + bottom.len(),
            top.iter().chain(bottom.iter()).copied(),
        )
    }

    #[test]
    fn penalty_loop_matches_brute_force_scan() {
        let c = AdaptConfig {
            max_penalty_doublings: 120,
            ..cfg()
        };
        let e = problem_by_name("maratos").unwrap();
        let mut rng_state = 7u64;
        let mut next = || {
            rng_state = rng_state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let mut checked = 0;
        for _ in 0..200 {
            let p = PrimalDualPoint::from_slices(&[next(), next()], &[next()]);
            let eval = PointEval::new(e.problem.as_ref(), &p.x);
            let bundle = eval.exact_bundle(&p.lambda);
            let Ok(dir) = stochastic_direction(&eval, &bundle.grad_l, &bundle, DEFAULT_RCOND_MIN)
            else {
                continue;
            };
            let mu0 = 1e-3;
            let req = 0.5
                * c.gamma_rh
                * (dir.dx.norm_squared() + (&eval.jac * &bundle.grad_l).norm_squared());
            let scan = (0..=c.max_penalty_doublings).find(|&j| {
                let mu = mu0 * c.rho.powi(j as i32);
                let gm = scratch_merit_grad(&eval, &bundle.grad_l, &bundle.m, mu, c.nu);
                gm.dot(&dir.stacked()) <= -req && eval.c.norm() <= gm.norm()
            });
            match (
                scan,
                penalty_loop_stochastic(&eval, &bundle.grad_l, &bundle, &dir, mu0, &c),
            ) {
                (Some(j), Ok(up)) => {
                    assert_eq!(up.doublings, j);
                    checked += 1;
                }
                (None, Err(SolverError::PenaltyLoopDiverged { .. })) => {}
                (s, r) => panic!("scan {s:?} vs loop {r:?}"),
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn penalty_loop_at_feasible_point_keeps_mu_when_decrease_holds() {
        let e = problem_by_name("maratos").unwrap();
        // on the circle, c = 0
        let t: f64 = 0.7;
        let p = PrimalDualPoint::from_slices(&[t.cos(), t.sin()], &[0.0]);
        let eval = PointEval::new(e.problem.as_ref(), &p.x);
        assert!(eval.c.norm() < 1e-15);
        let bundle = eval.exact_bundle(&p.lambda);
        let dir = stochastic_direction(&eval, &bundle.grad_l, &bundle, DEFAULT_RCOND_MIN).unwrap();
        let up =
            penalty_loop_stochastic(&eval, &bundle.grad_l, &bundle, &dir, 1.0, &cfg()).unwrap();
        assert_eq!(up.doublings, 0);
        assert_eq!(up.mu, 1.0);
    }

    #[test]
    fn zero_noise_nonadaptive_matches_fixed_step_loop() {
        for e in analytic_suite() {
            let alpha = 0.1;
            let config = NonAdaptConfig {
                schedule: StepSchedule::Constant(alpha),
                max_iter: 40,
                stop_threshold: 0.0,
                ..Default::default()
            };
            let sol = solve_nonadaptive(e.problem.as_ref(), &e.start, &config).unwrap();
            let mut p = e.start.clone();
            for _ in 0..sol.iterations {
                let eval = PointEval::new(e.problem.as_ref(), &p.x);
                let b = eval.exact_bundle(&p.lambda);
                let d = p.x.len();
                let dir = compute_direction(
                    &DMatrix::identity(d, d),
                    &eval.jac,
                    &b.grad_l,
                    &eval.c,
                    &b.m,
                    DEFAULT_RCOND_MIN,
                )
                .unwrap();
                p = p.stepped(alpha, &dir.dx, &dir.dlambda);
            }
            assert_eq!(sol.point, p, "{}", e.problem.name());
        }
    }

    #[test]
    fn nonadaptive_is_reproducible_per_seed() {
        let e = problem_by_name("hs6").unwrap();
        let config = NonAdaptConfig {
            noise: NoiseModel::new(1e-2).unwrap(),
            seed: 4,
            max_iter: 300,
            ..Default::default()
        };
        let a = solve_nonadaptive(e.problem.as_ref(), &e.start, &config).unwrap();
        let b = solve_nonadaptive(e.problem.as_ref(), &e.start, &config).unwrap();
        assert_eq!(a.point, b.point);
        assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
        let c = solve_nonadaptive(
            e.problem.as_ref(),
            &e.start,
            &NonAdaptConfig { seed: 5, ..config },
        )
        .unwrap();
        assert_ne!(a.point, c.point);
    }

    fn check_trace(trace: &[StoIterationRecord], c: &AdaptConfig) {
        for w in trace.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            assert!(b.batch_grad > a.batch_grad);
            assert!(b.mu_bar >= a.mu_bar);
            let r = b.eps_bar / a.eps_bar;
            assert!((r - c.rho).abs() < 1e-12 || (r - 1.0 / c.rho).abs() < 1e-12);
            if a.step_class == StepClass::Unsuccessful {
                assert_eq!(a.kkt_norm, b.kkt_norm);
            }
        }
        for r in trace {
            assert!(r.alpha_bar <= c.alpha_max && r.alpha_bar > 0.0);
            let j = (r.alpha_bar / c.alpha_max).ln() / c.rho.ln();
            assert!((j - j.round()).abs() < 1e-9);
            assert!(r.eps_bar > 0.0);
            assert!(r.dir_deriv < 0.0);
        }
    }

    #[test]
    fn zero_noise_adaptive_converges_on_suite() {
        let c = cfg();
        for e in analytic_suite() {
            let sol = solve_adaptive(e.problem.as_ref(), &e.start, &c).unwrap();
            assert_eq!(sol.status, SolveStatus::Converged, "{}", e.problem.name());
            check_trace(&sol.trace, &c);
        }
    }

    #[test]
    fn noisy_adaptive_trace_invariants() {
        let e = problem_by_name("poly5").unwrap();
        for seed in 0..3 {
            let c = AdaptConfig {
                noise: NoiseModel::new(1e-2).unwrap(),
                seed,
                ..cfg()
            };
            let sol = solve_adaptive(e.problem.as_ref(), &e.start, &c).unwrap();
            assert_eq!(sol.status, SolveStatus::Converged);
            check_trace(&sol.trace, &c);
            let again = solve_adaptive(e.problem.as_ref(), &e.start, &c).unwrap();
            assert_eq!(sol.trace, again.trace);
        }
    }
}

//! Synthetic noise on top of exact problem derivatives.
//!
//! A realization `zeta` carries additive noise `(e_f, e_g, E_H)` that does not
//! depend on the evaluation point, so
//! `f(x; zeta) = f(x) + e_f`, `grad f(x; zeta) = grad f(x) + e_g` and
//! `hess f(x; zeta) = hess f(x) + E_H` with
//!
//! * `e_f ~ N(0, s^2)`,
//! * `e_g = s (z + w 1)`, covariance `s^2 (I + 1 1^T)`,
//! * `E_H` symmetric with independent `N(0, s^2)` entries on and above the diagonal.
//!
//! The batch mean of `B` realizations is again Gaussian with covariance scaled
//! by `1/B`, which is how [`BatchNoise::draw`] samples it: one draw whatever
//! the batch size. [`BatchNoise::from_realizations`] averages explicit
//! realizations instead.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::kkt::{compute_direction, SearchDirection, DEFAULT_RCOND_MIN};
use crate::merit::SecondOrderBundle;
use crate::nlp::{EqualityProblem, PointEval, PrimalDualPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_sq: f64,
}

impl NoiseModel {
    pub fn new(sigma_sq: f64) -> Result<Self> {
        if !(sigma_sq >= 0.0 && sigma_sq.is_finite()) {
            return Err(SolverError::InvalidConfig(format!(
                "noise variance must be >= 0, got {sigma_sq}"
            )));
        }
        Ok(Self { sigma_sq })
    }

    pub fn exact() -> Self {
        Self { sigma_sq: 0.0 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

/// Number of realizations in a batch.
pub type BatchSize = u128;

/// Batch-averaged estimates of `f`, `grad f` and `hess f` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate {
    pub f_bar: f64,
    pub g_bar: DVector<f64>,
    pub h_bar: DMatrix<f64>,
    pub batch_size: BatchSize,
}

/// What a draw is used for; each purpose has its own random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Gradient = 0,
    Hessian = 1,
    Function = 2,
}

/// Counter-based random streams of one solver run.
///
/// The generator for `(iteration, purpose, trial)` is positioned directly, so
/// the values seen by one draw never depend on how many draws preceded it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunStreams {
    seed: u64,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, iteration: u64, purpose: Purpose, trial: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration);
        rng.set_word_pos(((purpose as u128) << 64) | ((trial as u128) << 40));
        rng
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Additive noise `(e_f, e_g, E_H)` scaled by `scale` (a standard deviation).
fn draw_noise<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    scale: f64,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let e_f = scale * normal(rng);
    let z = DVector::from_fn(d, |_, _| normal(rng));
    let w = normal(rng);
    let e_g = z.add_scalar(w) * scale;
    let mut e_h = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = scale * normal(rng);
            e_h[(i, j)] = v;
            e_h[(j, i)] = v;
        }
    }
    (e_f, e_g, e_h)
}

/// One realization `zeta`: its noise terms, reusable at any point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRealization {
    pub e_f: f64,
    pub e_g: DVector<f64>,
    pub e_h: DMatrix<f64>,
}

impl SampleRealization {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, model: NoiseModel, d: usize) -> Self {
        let (e_f, e_g, e_h) = draw_noise(rng, d, model.sigma());
        Self { e_f, e_g, e_h }
    }

    /// `(f(x; zeta), grad f(x; zeta), hess f(x; zeta))`.
    pub fn evaluate(
        &self,
        problem: &dyn EqualityProblem,
        x: &DVector<f64>,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        (
            problem.objective(x) + self.e_f,
            problem.gradient(x) + &self.e_g,
            problem.hessian(x) + &self.e_h,
        )
    }
}

/// Mean noise of a batch of realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub e_f: f64,
    pub e_g: DVector<f64>,
    pub e_h: DMatrix<f64>,
    pub batch_size: BatchSize,
}

impl BatchNoise {
    /// Samples the batch mean directly from its exact distribution.
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        model: NoiseModel,
        d: usize,
        batch_size: BatchSize,
    ) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        let scale = (model.sigma_sq / batch_size as f64).sqrt();
        let (e_f, e_g, e_h) = draw_noise(rng, d, scale);
        Self {
            e_f,
            e_g,
            e_h,
            batch_size,
        }
    }

    pub fn from_realizations(samples: &[SampleRealization]) -> Self {
        assert!(!samples.is_empty(), "batch size must be positive");
        let n = samples.len() as f64;
        let d = samples[0].e_g.len();
        let mut e_f = 0.0;
        let mut e_g = DVector::zeros(d);
        let mut e_h = DMatrix::zeros(d, d);
        for s in samples {
            e_f += s.e_f;
            e_g += &s.e_g;
            e_h += &s.e_h;
        }
        Self {
            e_f: e_f / n,
            e_g: e_g / n,
            e_h: e_h / n,
            batch_size: samples.len() as BatchSize,
        }
    }

    pub fn estimate_at(&self, problem: &dyn EqualityProblem, x: &DVector<f64>) -> BatchEstimate {
        self.estimate_from(
            problem.objective(x),
            &problem.gradient(x),
            &problem.hessian(x),
        )
    }

    /// Estimate on top of exact values already evaluated at the point.
    pub fn estimate_from(
        &self,
        f: f64,
        grad_f: &DVector<f64>,
        hess_f: &DMatrix<f64>,
    ) -> BatchEstimate {
        BatchEstimate {
            f_bar: f + self.e_f,
            g_bar: grad_f + &self.e_g,
            h_bar: hess_f + &self.e_h,
            batch_size: self.batch_size,
        }
    }

    pub fn estimate_eval(&self, eval: &PointEval) -> BatchEstimate {
        self.estimate_from(eval.f, &eval.grad_f, &eval.hess_f)
    }
}

/// Batch estimate of `(f, grad f, hess f)` at `x`.
pub fn sample_estimate<R: Rng + ?Sized>(
    problem: &dyn EqualityProblem,
    x: &DVector<f64>,
    model: NoiseModel,
    batch_size: BatchSize,
    rng: &mut R,
) -> BatchEstimate {
    BatchNoise::draw(rng, model, problem.dim(), batch_size).estimate_at(problem, x)
}

/// Function and gradient estimates at two points from one common batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionPair {
    pub f_x: f64,
    pub g_x: DVector<f64>,
    pub f_trial: f64,
    pub g_trial: DVector<f64>,
    pub batch_size: BatchSize,
}

impl FunctionPair {
    pub fn from_noise(noise: &BatchNoise, at_x: &PointEval, at_trial: &PointEval) -> Self {
        Self {
            f_x: at_x.f + noise.e_f,
            g_x: &at_x.grad_f + &noise.e_g,
            f_trial: at_trial.f + noise.e_f,
            g_trial: &at_trial.grad_f + &noise.e_g,
            batch_size: noise.batch_size,
        }
    }
}

pub fn sample_function_pair<R: Rng + ?Sized>(
    problem: &dyn EqualityProblem,
    x: &DVector<f64>,
    x_trial: &DVector<f64>,
    model: NoiseModel,
    batch_size: BatchSize,
    rng: &mut R,
) -> FunctionPair {
    let noise = BatchNoise::draw(rng, model, problem.dim(), batch_size);
    FunctionPair {
        f_x: problem.objective(x) + noise.e_f,
        g_x: problem.gradient(x) + &noise.e_g,
        f_trial: problem.objective(x_trial) + noise.e_f,
        g_trial: problem.gradient(x_trial) + &noise.e_g,
        batch_size,
    }
}

/// Stochastic direction with `B = I`: `grad_l` drives the KKT solve, the
/// dual solve uses `M` from `second_order`.
pub fn stochastic_direction(
    eval: &PointEval,
    grad_l: &DVector<f64>,
    second_order: &SecondOrderBundle,
    rcond_min: f64,
) -> Result<SearchDirection> {
    let d = grad_l.len();
    compute_direction(
        &DMatrix::identity(d, d),
        &eval.jac,
        grad_l,
        &eval.c,
        &second_order.m,
        rcond_min,
    )
}

/// Per-component Monte Carlo comparison of a sample mean with its target.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub target: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl ComponentCheck {
    fn from_sums(
        target: &DVector<f64>,
        sum: &DVector<f64>,
        sum_sq: &DVector<f64>,
        n: usize,
    ) -> Self {
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std_err = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / nf - m * m).max(0.0) / (nf - 1.0).max(1.0)).sqrt())
            .collect();
        Self {
            target: target.iter().copied().collect(),
            mean,
            std_err,
        }
    }

    /// Largest `|mean - target|` measured in standard errors.
    pub fn max_z(&self) -> f64 {
        self.target
            .iter()
            .zip(&self.mean)
            .zip(&self.std_err)
            .map(|((t, m), s)| {
                let gap = (m - t).abs();
                if *s > 0.0 {
                    gap / s
                } else if gap <= 1e-12 * (1.0 + t.abs()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    pub n_trials: usize,
    pub dx: ComponentCheck,
    pub dlambda: ComponentCheck,
    /// `|G grad_x L|^2` at the exact gradient and its Monte Carlo mean.
    pub g_grad_sq_exact: f64,
    pub g_grad_sq_mean: f64,
}

impl UnbiasednessReport {
    pub const Z_GATE: f64 = 4.0;

    pub fn dx_unbiased(&self) -> bool {
        self.dx.max_z() <= Self::Z_GATE
    }

    pub fn dlambda_unbiased(&self) -> bool {
        self.dlambda.max_z() <= Self::Z_GATE
    }

    pub fn jensen_holds(&self) -> bool {
        self.g_grad_sq_mean >= self.g_grad_sq_exact * (1.0 - 1e-12)
    }

    pub fn passed(&self) -> bool {
        self.dx_unbiased() && self.dlambda_unbiased() && self.jensen_holds()
    }
}

/// Monte Carlo over `n_trials` single-sample directions with independent
/// gradient and Hessian draws, compared against the exact `B = I` direction.
pub fn direction_unbiasedness_test(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    model: NoiseModel,
    n_trials: usize,
    seed: u64,
) -> Result<UnbiasednessReport> {
    p.check_dims(problem)?;
    if n_trials < 2 {
        return Err(SolverError::InvalidConfig(
            "need at least two trials".into(),
        ));
    }
    let eval = PointEval::new(problem, &p.x);
    let exact_bundle = eval.exact_bundle(&p.lambda);
    let exact = stochastic_direction(
        &eval,
        &exact_bundle.grad_l,
        &exact_bundle,
        DEFAULT_RCOND_MIN,
    )?;
    let g_grad_sq_exact = (&eval.jac * &exact_bundle.grad_l).norm_squared();

    let (d, m) = (problem.dim(), problem.num_constraints());
    let streams = RunStreams::new(seed);
    let (mut sx, mut sxx) = (DVector::zeros(d), DVector::zeros(d));
    let (mut sl, mut sll) = (DVector::zeros(m), DVector::zeros(m));
    let mut g_sq_sum = 0.0;
    for t in 0..n_trials {
        let g_est = BatchNoise::draw(
            &mut streams.rng(t as u64, Purpose::Gradient, 0),
            model,
            d,
            1,
        )
        .estimate_eval(&eval);
        let h_est = BatchNoise::draw(&mut streams.rng(t as u64, Purpose::Hessian, 0), model, d, 1)
            .estimate_eval(&eval);
        let grad_l = eval.lagrangian_gradient_with(&g_est.g_bar, &p.lambda);
        let bundle = eval.build_bundle(&p.lambda, &h_est.h_bar, &h_est.g_bar);
        let dir = stochastic_direction(&eval, &grad_l, &bundle, DEFAULT_RCOND_MIN)?;
        sx += &dir.dx;
        sxx += dir.dx.component_mul(&dir.dx);
        sl += &dir.dlambda;
        sll += dir.dlambda.component_mul(&dir.dlambda);
        g_sq_sum += (&eval.jac * &grad_l).norm_squared();
    }
    Ok(UnbiasednessReport {
        n_trials,
        dx: ComponentCheck::from_sums(&exact.dx, &sx, &sxx, n_trials),
        dlambda: ComponentCheck::from_sums(&exact.dlambda, &sl, &sll, n_trials),
        g_grad_sq_exact,
        g_grad_sq_mean: g_sq_sum / n_trials as f64,
    })
}

/// Gradient-side and Hessian-side estimates for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeDraw {
    pub grad: BatchEstimate,
    pub hess: BatchEstimate,
}

/// How the gradient and Hessian estimates of one iteration are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Two independent batches.
    Independent,
    /// One batch feeds both estimates.
    Shared,
}

/// Draws the derivative estimates at `eval` for iteration `k`, redraw `trial`.
pub fn draw_derivatives(
    eval: &PointEval,
    streams: &RunStreams,
    k: u64,
    trial: u32,
    model: NoiseModel,
    batch_size: BatchSize,
    mode: SamplingMode,
) -> DerivativeDraw {
    let d = eval.grad_f.len();
    let grad_noise = BatchNoise::draw(
        &mut streams.rng(k, Purpose::Gradient, trial),
        model,
        d,
        batch_size,
    );
    let grad = grad_noise.estimate_eval(eval);
    let hess = match mode {
        SamplingMode::Shared => grad.clone(),
        SamplingMode::Independent => BatchNoise::draw(
            &mut streams.rng(k, Purpose::Hessian, trial),
            model,
            d,
            batch_size,
        )
        .estimate_eval(eval),
    };
    DerivativeDraw { grad, hess }
}

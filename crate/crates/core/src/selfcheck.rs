//! Quick invariant checks run by `stosqp check`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::det::{solve_deterministic, DetSqpConfig};
use crate::kkt::{compute_direction, directional_derivative_closed_form, DEFAULT_RCOND_MIN};
use crate::merit::MeritParams;
use crate::nlp::{analytic_suite, kkt_residual, EqualityProblem, PointEval, PrimalDualPoint};
use crate::oracle::NoiseModel;
use crate::sto::{solve_adaptive, AdaptConfig, StepClass};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn random_point(rng: &mut ChaCha8Rng, d: usize, m: usize) -> PrimalDualPoint {
    let x = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
    let l = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
    PrimalDualPoint::new(x, l)
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

fn suite_references() -> (bool, String) {
    let worst = analytic_suite()
        .iter()
        .map(|e| kkt_residual(e.problem.as_ref(), &e.reference.point))
        .fold(0.0, f64::max);
    (
        worst <= 1e-10,
        format!("max reference residual {worst:.2e}"),
    )
}

fn derivatives() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for e in analytic_suite() {
        let p = e.problem.as_ref();
        for _ in 0..20 {
            let x = random_point(&mut rng, p.dim(), 0).x;
            worst = worst.max(rel_err(
                &p.gradient(&x),
                &fd_gradient(|y| p.objective(y), &x, 1e-6),
            ));
            let jac = p.jacobian(&x);
            for i in 0..p.num_constraints() {
                let row = jac.row(i).transpose();
                worst = worst.max(rel_err(
                    &row,
                    &fd_gradient(|y| p.constraints(y)[i], &x, 1e-6),
                ));
            }
        }
    }
    (worst <= 1e-5, format!("max relative error {worst:.2e}"))
}

fn merit_gradient(
    p: &dyn EqualityProblem,
    point: &PrimalDualPoint,
    params: MeritParams,
) -> (DVector<f64>, DVector<f64>) {
    let eval = PointEval::new(p, &point.x);
    let analytic = eval.merit_gradient(params, &eval.exact_bundle(&point.lambda));
    let d = p.dim();
    let z = DVector::from_iterator(
        d + point.lambda.len(),
        point.x.iter().chain(point.lambda.iter()).copied(),
    );
    let value = |z: &DVector<f64>| {
        let q = PrimalDualPoint::new(
            z.rows(0, d).into_owned(),
            z.rows(d, z.len() - d).into_owned(),
        );
        PointEval::new(p, &q.x).merit_value(&q.lambda, params)
    };
    (analytic, fd_gradient(value, &z, 1e-6))
}

fn merit_gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for e in analytic_suite() {
        let p = e.problem.as_ref();
        for _ in 0..20 {
            let point = random_point(&mut rng, p.dim(), p.num_constraints());
            for (mu, nu) in [(1.0, 1e-3), (10.0, 1.0)] {
                let (a, fd) = merit_gradient(p, &point, MeritParams { mu, nu });
                worst = worst.max(rel_err(&a, &fd));
            }
        }
    }
    (worst <= 1e-6, format!("max relative error {worst:.2e}"))
}

fn directional_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for e in analytic_suite() {
        let p = e.problem.as_ref();
        for _ in 0..20 {
            let point = random_point(&mut rng, p.dim(), p.num_constraints());
            let eval = PointEval::new(p, &point.x);
            let bundle = eval.exact_bundle(&point.lambda);
            let b = DMatrix::identity(p.dim(), p.dim());
            let Ok(dir) = compute_direction(
                &b,
                &eval.jac,
                &bundle.grad_l,
                &eval.c,
                &bundle.m,
                DEFAULT_RCOND_MIN,
            ) else {
                continue;
            };
            let params = MeritParams { mu: 1.0, nu: 1e-3 };
            let inner = eval.merit_gradient(params, &bundle).dot(&dir.stacked());
            let g2 = (&eval.jac * &bundle.grad_l).norm_squared();
            let closed = directional_derivative_closed_form(
                &b,
                &dir.dx,
                &eval.c,
                &dir.dlambda,
                &dir.dlambda_aux,
                1.0,
                1e-3,
                g2,
            );
            worst = worst.max((inner - closed).abs() / closed.abs().max(1.0));
        }
    }
    (worst <= 1e-9, format!("max relative error {worst:.2e}"))
}

fn deterministic_runs() -> (bool, String) {
    let config = DetSqpConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for e in analytic_suite() {
        match solve_deterministic(e.problem.as_ref(), &e.start, &config) {
            Ok(sol) => {
                let half = &sol.trace[sol.trace.len() / 2..];
                let stable = half.windows(2).all(|w| w[0].mu == w[1].mu);
                ok &= sol.final_kkt <= 1e-8 && stable;
                notes.push(format!("{}:{}", e.problem.name(), sol.trace.len()));
            }
            Err(f) => {
                ok = false;
                notes.push(format!("{}:{}", e.problem.name(), f.error.tag()));
            }
        }
    }
    (ok, format!("iterations {}", notes.join(" ")))
}

fn adaptive_invariants() -> (bool, String) {
    let mut violations = 0;
    let mut runs = 0;
    for e in analytic_suite() {
        for seed in 0..2 {
            let config = AdaptConfig {
                noise: NoiseModel { sigma_sq: 1e-2 },
                seed,
                ..Default::default()
            };
            let Ok(sol) = solve_adaptive(e.problem.as_ref(), &e.start, &config) else {
                violations += 1;
                continue;
            };
            runs += 1;
            for w in sol.trace.windows(2) {
                let (a, b) = (&w[0], &w[1]);
                let ratio = b.eps_bar / a.eps_bar;
                let eps_ok =
                    (ratio - config.rho).abs() < 1e-9 || (ratio * config.rho - 1.0).abs() < 1e-9;
                let fixed = a.step_class != StepClass::Unsuccessful || a.kkt_norm == b.kkt_norm;
                if b.batch_grad <= a.batch_grad || b.mu_bar < a.mu_bar || !eps_ok || !fixed {
                    violations += 1;
                }
            }
            violations += sol
                .trace
                .iter()
                .filter(|r| r.alpha_bar > config.alpha_max)
                .count();
        }
    }
    (
        violations == 0,
        format!("{runs} runs, {violations} violations"),
    )
}

/// Runs every check in order.
pub fn run_all() -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn() -> (bool, String)); 6] = [
        ("suite reference solutions", suite_references),
        ("problem derivatives vs finite differences", derivatives),
        ("merit gradient vs finite differences", merit_gradients),
        ("directional derivative closed form", directional_identity),
        ("deterministic convergence", deterministic_runs),
        ("adaptive trace invariants", adaptive_invariants),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let t = Instant::now();
            let (passed, detail) = f();
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

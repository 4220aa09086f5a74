//! The differentiable exact augmented Lagrangian
//!
//! ```text
//! L_{mu,nu}(x, lambda) = f + lambda^T c + mu/2 |c|^2 + nu/2 |G grad_x L|^2
//! ```
//!
//! and its gradient, built from the `M = hess_L G^T + T` matrix with
//! `T[:, i] = hess c_i * grad_x L`. The same code path serves exact and
//! estimated derivatives: exact evaluation is the special case where the
//! estimates equal the true values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::nlp::{EqualityProblem, PointEval, PrimalDualPoint};

/// Penalty parameters `(mu, nu)` of the merit function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritParams {
    pub mu: f64,
    pub nu: f64,
}

impl MeritParams {
    pub fn new(mu: f64, nu: f64) -> Result<Self> {
        if !(mu > 0.0 && nu > 0.0 && mu.is_finite() && nu.is_finite()) {
            return Err(SolverError::InvalidConfig(format!(
                "merit parameters must be positive, got mu={mu}, nu={nu}"
            )));
        }
        Ok(Self { mu, nu })
    }

    pub fn with_mu(self, mu: f64) -> Self {
        Self { mu, ..self }
    }
}

/// Second-order quantities at one primal-dual point.
///
/// `grad_l` is the Lagrangian gradient (or estimate) that fed `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderBundle {
    pub hess_l: DMatrix<f64>,
    pub grad_l: DVector<f64>,
    pub m: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

/// `f + lambda^T c + mu/2 |c|^2 + nu/2 |G grad_l|^2` for given ingredients.
pub(crate) fn merit_value_parts(
    f: f64,
    c: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: &DVector<f64>,
    grad_l: &DVector<f64>,
    params: MeritParams,
) -> f64 {
    let g_grad = jac * grad_l;
    f + lambda.dot(c) + 0.5 * params.mu * c.norm_squared() + 0.5 * params.nu * g_grad.norm_squared()
}

/// Stacked `((I + nu M G) grad_l + mu G^T c, c + nu G G^T G grad_l)`.
pub(crate) fn merit_gradient_parts(
    c: &DVector<f64>,
    jac: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    m: &DMatrix<f64>,
    params: MeritParams,
) -> DVector<f64> {
    let (d, k) = (jac.ncols(), jac.nrows());
    let g_grad = jac * grad_l;
    let primal = grad_l + m * &g_grad * params.nu + jac.tr_mul(c) * params.mu;
    let dual = c + jac * jac.tr_mul(&g_grad) * params.nu;
    let mut out = DVector::zeros(d + k);
    out.rows_mut(0, d).copy_from(&primal);
    out.rows_mut(d, k).copy_from(&dual);
    out
}

impl PointEval {
    pub fn merit_value(&self, lambda: &DVector<f64>, params: MeritParams) -> f64 {
        self.stochastic_merit_value(lambda, params, self.f, &self.grad_f)
    }

    pub fn stochastic_merit_value(
        &self,
        lambda: &DVector<f64>,
        params: MeritParams,
        f_est: f64,
        grad_f_est: &DVector<f64>,
    ) -> f64 {
        let grad_l = self.lagrangian_gradient_with(grad_f_est, lambda);
        merit_value_parts(f_est, &self.c, &self.jac, lambda, &grad_l, params)
    }

    pub fn build_bundle(
        &self,
        lambda: &DVector<f64>,
        hess_f_est: &DMatrix<f64>,
        grad_f_est: &DVector<f64>,
    ) -> SecondOrderBundle {
        let hess_l = self.lagrangian_hessian_with(hess_f_est, lambda);
        let grad_l = self.lagrangian_gradient_with(grad_f_est, lambda);
        let d = grad_l.len();
        let mut t = DMatrix::zeros(d, self.hess_c.len());
        for (i, hc) in self.hess_c.iter().enumerate() {
            t.set_column(i, &(hc * &grad_l));
        }
        let m = &hess_l * self.jac.transpose() + &t;
        SecondOrderBundle {
            hess_l,
            grad_l,
            m,
            t,
        }
    }

    pub fn exact_bundle(&self, lambda: &DVector<f64>) -> SecondOrderBundle {
        self.build_bundle(lambda, &self.hess_f, &self.grad_f)
    }

    /// Merit gradient with the Lagrangian gradient built from `grad_f_est`
    /// and `M` taken from `bundle`.
    pub fn stochastic_merit_gradient(
        &self,
        lambda: &DVector<f64>,
        params: MeritParams,
        bundle: &SecondOrderBundle,
        grad_f_est: &DVector<f64>,
    ) -> DVector<f64> {
        let grad_l = self.lagrangian_gradient_with(grad_f_est, lambda);
        merit_gradient_parts(&self.c, &self.jac, &grad_l, &bundle.m, params)
    }

    pub fn merit_gradient(&self, params: MeritParams, bundle: &SecondOrderBundle) -> DVector<f64> {
        merit_gradient_parts(&self.c, &self.jac, &bundle.grad_l, &bundle.m, params)
    }
}

/// Value of the augmented Lagrangian merit function at `p`.
pub fn merit_value(problem: &dyn EqualityProblem, p: &PrimalDualPoint, params: MeritParams) -> f64 {
    PointEval::new(problem, &p.x).merit_value(&p.lambda, params)
}

/// Exact gradient of the merit function; `bundle` must come from exact derivatives at `p`.
pub fn merit_gradient(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    params: MeritParams,
    bundle: &SecondOrderBundle,
) -> DVector<f64> {
    PointEval::new(problem, &p.x).merit_gradient(params, bundle)
}

/// Builds `hess_L`, `M` and `T` from (possibly noisy) estimates of `hess f` and `grad f`.
pub fn build_bundle(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    hess_f_est: &DMatrix<f64>,
    grad_f_est: &DVector<f64>,
) -> SecondOrderBundle {
    PointEval::new(problem, &p.x).build_bundle(&p.lambda, hess_f_est, grad_f_est)
}

/// Merit value with the objective and its gradient replaced by estimates.
pub fn stochastic_merit_value(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    params: MeritParams,
    f_est: f64,
    grad_f_est: &DVector<f64>,
) -> f64 {
    PointEval::new(problem, &p.x).stochastic_merit_value(&p.lambda, params, f_est, grad_f_est)
}

/// Merit gradient estimate from a gradient batch and a bundle of estimated second-order terms.
pub fn stochastic_merit_gradient(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
    params: MeritParams,
    bundle: &SecondOrderBundle,
    grad_f_est: &DVector<f64>,
) -> DVector<f64> {
    PointEval::new(problem, &p.x).stochastic_merit_gradient(&p.lambda, params, bundle, grad_f_est)
}

//! Equality-constrained problems, KKT residuals, and the analytic test suite.
//!
//! A problem is `min f(x) s.t. c(x) = 0` with hand-coded first and second
//! derivatives. `G(x)` denotes the constraint Jacobian (row `i` is the
//! transposed gradient of `c_i`). Evaluators are pure; all randomness lives in
//! [`crate::oracle`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};

/// Objective and constraints of `min f(x) s.t. c(x) = 0` with derivatives.
pub trait EqualityProblem: Send + Sync {
    fn name(&self) -> &str;
    /// Primal dimension `d`.
    fn dim(&self) -> usize;
    /// Number of equality constraints `m`.
    fn num_constraints(&self) -> usize;

    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `m x d` Jacobian `G(x)`.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Hessian of constraint `i` (zero based).
    fn constraint_hessian(&self, x: &DVector<f64>, i: usize) -> DMatrix<f64>;
}

impl fmt::Debug for dyn EqualityProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(d={}, m={})",
            self.name(),
            self.dim(),
            self.num_constraints()
        )
    }
}

/// Primal-dual iterate `(x, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn new(x: DVector<f64>, lambda: DVector<f64>) -> Self {
        Self { x, lambda }
    }

    pub fn from_slices(x: &[f64], lambda: &[f64]) -> Self {
        Self::new(
            DVector::from_column_slice(x),
            DVector::from_column_slice(lambda),
        )
    }

    pub fn check_dims(&self, problem: &dyn EqualityProblem) -> Result<()> {
        if self.x.len() != problem.dim() || self.lambda.len() != problem.num_constraints() {
            return Err(SolverError::Dimension(format!(
                "point has (d={}, m={}), problem {} expects (d={}, m={})",
                self.x.len(),
                self.lambda.len(),
                problem.name(),
                problem.dim(),
                problem.num_constraints()
            )));
        }
        Ok(())
    }

    /// `(x, lambda) + alpha * (dx, dlambda)`.
    pub fn stepped(&self, alpha: f64, dx: &DVector<f64>, dlambda: &DVector<f64>) -> Self {
        Self {
            x: &self.x + dx * alpha,
            lambda: &self.lambda + dlambda * alpha,
        }
    }

    /// Euclidean distance in the stacked primal-dual space.
    pub fn distance(&self, other: &PrimalDualPoint) -> f64 {
        ((&self.x - &other.x).norm_squared() + (&self.lambda - &other.lambda).norm_squared()).sqrt()
    }

    pub fn norm(&self) -> f64 {
        (self.x.norm_squared() + self.lambda.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x
            .iter()
            .chain(self.lambda.iter())
            .all(|v| v.is_finite())
    }
}

/// Every exact quantity the solvers need at one primal point.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub f: f64,
    pub grad_f: DVector<f64>,
    pub hess_f: DMatrix<f64>,
    pub c: DVector<f64>,
    pub jac: DMatrix<f64>,
    pub hess_c: Vec<DMatrix<f64>>,
}

impl PointEval {
    pub fn new(problem: &dyn EqualityProblem, x: &DVector<f64>) -> Self {
        let hess_c = (0..problem.num_constraints())
            .map(|i| problem.constraint_hessian(x, i))
            .collect();
        Self {
            f: problem.objective(x),
            grad_f: problem.gradient(x),
            hess_f: problem.hessian(x),
            c: problem.constraints(x),
            jac: problem.jacobian(x),
            hess_c,
        }
    }

    /// `grad_f_est + G^T lambda`.
    pub fn lagrangian_gradient_with(
        &self,
        grad_f_est: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> DVector<f64> {
        grad_f_est + self.jac.tr_mul(lambda)
    }

    pub fn lagrangian_gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.lagrangian_gradient_with(&self.grad_f, lambda)
    }

    /// `hess_f_est + sum_i lambda_i * hess c_i`.
    pub fn lagrangian_hessian_with(
        &self,
        hess_f_est: &DMatrix<f64>,
        lambda: &DVector<f64>,
    ) -> DMatrix<f64> {
        let mut h = hess_f_est.clone();
        for (hc, &l) in self.hess_c.iter().zip(lambda.iter()) {
            h += hc * l;
        }
        h
    }

    pub fn kkt_residual(&self, lambda: &DVector<f64>) -> f64 {
        (self.lagrangian_gradient(lambda).norm_squared() + self.c.norm_squared()).sqrt()
    }
}

/// Returns `(grad_x L, c(x))` with `grad_x L = grad f(x) + G(x)^T lambda`.
pub fn lagrangian_parts(
    problem: &dyn EqualityProblem,
    p: &PrimalDualPoint,
) -> (DVector<f64>, DVector<f64>) {
    let grad = problem.gradient(&p.x) + problem.jacobian(&p.x).tr_mul(&p.lambda);
    (grad, problem.constraints(&p.x))
}

/// Euclidean norm of the stacked KKT vector `(grad_x L, c)`.
pub fn kkt_residual(problem: &dyn EqualityProblem, p: &PrimalDualPoint) -> f64 {
    let (g, c) = lagrangian_parts(problem, p);
    (g.norm_squared() + c.norm_squared()).sqrt()
}

/// Singular values of `G(x)` in descending order. The smallest one measures
/// how close the iterate is to losing full row rank.
pub fn jacobian_singular_values(problem: &dyn EqualityProblem, x: &DVector<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = problem
        .jacobian(x)
        .singular_values()
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Known KKT point of a suite problem.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub point: PrimalDualPoint,
    pub tolerance: f64,
}

/// A registered test problem with its reference solution and documented start.
#[derive(Clone)]
pub struct SuiteEntry {
    pub problem: Arc<dyn EqualityProblem>,
    pub reference: ReferenceSolution,
    pub start: PrimalDualPoint,
}

impl fmt::Debug for SuiteEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SuiteEntry")
            .field("problem", &self.problem.name())
            .field("reference", &self.reference)
            .field("start", &self.start)
            .finish()
    }
}

impl SuiteEntry {
    fn verified(
        problem: Arc<dyn EqualityProblem>,
        point: PrimalDualPoint,
        start: PrimalDualPoint,
    ) -> Self {
        let tolerance = 1e-10;
        let residual = kkt_residual(problem.as_ref(), &point);
        assert!(
            residual <= tolerance,
            "reference solution of {} has KKT residual {residual:e} > {tolerance:e}",
            problem.name()
        );
        Self {
            problem,
            reference: ReferenceSolution { point, tolerance },
            start,
        }
    }
}

/// Convex quadratic objective `1/2 x^T Q x + b^T x` with linear constraints `A x = r`.
#[derive(Debug, Clone)]
pub struct ConvexQuadratic {
    name: String,
    q: DMatrix<f64>,
    b: DVector<f64>,
    a: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl ConvexQuadratic {
    pub fn new(
        name: &str,
        q: DMatrix<f64>,
        b: DVector<f64>,
        a: DMatrix<f64>,
        rhs: DVector<f64>,
    ) -> Self {
        assert_eq!(q.nrows(), q.ncols());
        assert_eq!(q.nrows(), b.len());
        assert_eq!(a.ncols(), b.len());
        assert_eq!(a.nrows(), rhs.len());
        Self {
            name: name.to_owned(),
            q,
            b,
            a,
            rhs,
        }
    }

    /// KKT point from a direct solve of `[Q A^T; A 0] (x, lambda) = (-b, r)`.
    pub fn kkt_point(&self) -> Option<PrimalDualPoint> {
        let (d, m) = (self.b.len(), self.rhs.len());
        let mut k = DMatrix::zeros(d + m, d + m);
        k.view_mut((0, 0), (d, d)).copy_from(&self.q);
        k.view_mut((0, d), (d, m)).copy_from(&self.a.transpose());
        k.view_mut((d, 0), (m, d)).copy_from(&self.a);
        let mut rhs = DVector::zeros(d + m);
        rhs.rows_mut(0, d).copy_from(&(-&self.b));
        rhs.rows_mut(d, m).copy_from(&self.rhs);
        let sol = k.lu().solve(&rhs)?;
        Some(PrimalDualPoint::new(
            sol.rows(0, d).into_owned(),
            sol.rows(d, m).into_owned(),
        ))
    }
}

impl EqualityProblem for ConvexQuadratic {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn num_constraints(&self) -> usize {
        self.rhs.len()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.b.dot(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.b
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.rhs
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }
    fn constraint_hessian(&self, x: &DVector<f64>, _i: usize) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
}

/// `f = 2(x1^2 + x2^2 - 1) - x1`, `c = x1^2 + x2^2 - 1`; solution `(1, 0)`, `lambda = -3/2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Maratos;

impl EqualityProblem for Maratos {
    fn name(&self) -> &str {
        "maratos"
    }
    fn dim(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        2.0 * (x[0] * x[0] + x[1] * x[1] - 1.0) - x[0]
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![4.0 * x[0] - 1.0, 4.0 * x[1]])
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(2, 2, 4.0)
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0] * x[0] + x[1] * x[1] - 1.0)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[2.0 * x[0], 2.0 * x[1]])
    }
    fn constraint_hessian(&self, _x: &DVector<f64>, _i: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(2, 2, 2.0)
    }
}

/// Hock-Schittkowski problem 6: `f = (1 - x1)^2`, `c = 10 (x2 - x1^2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hs6;

impl EqualityProblem for Hs6 {
    fn name(&self) -> &str {
        "hs6"
    }
    fn dim(&self) -> usize {
        2
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        (1.0 - x[0]).powi(2)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![-2.0 * (1.0 - x[0]), 0.0])
    }
    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 10.0 * (x[1] - x[0] * x[0]))
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[-20.0 * x[0], 10.0])
    }
    fn constraint_hessian(&self, _x: &DVector<f64>, _i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-20.0, 0.0, 0.0, 0.0])
    }
}

/// Nonconvex quartic in five variables with a sphere and a bilinear constraint.
///
/// `f = x1 x2 x3 + 1/4 sum x_i^4 - x4 x5 + b^T x`,
/// `c1 = |x|^2 - 5`, `c2 = x1 + x3 - x2 x5 - 1`.
/// The linear term `b` is fixed so that `x = 1`, `lambda = (1/2, -1/4)` is a
/// strict local minimizer.
#[derive(Debug, Clone)]
pub struct Poly5 {
    b: DVector<f64>,
}

impl Poly5 {
    pub fn solution() -> PrimalDualPoint {
        PrimalDualPoint::from_slices(&[1.0; 5], &[0.5, -0.25])
    }

    pub fn new() -> Self {
        let base = Self {
            b: DVector::zeros(5),
        };
        let star = Self::solution();
        let b = -(base.gradient(&star.x) + base.jacobian(&star.x).tr_mul(&star.lambda));
        Self { b }
    }
}

impl Default for Poly5 {
    fn default() -> Self {
        Self::new()
    }
}

impl EqualityProblem for Poly5 {
    fn name(&self) -> &str {
        "poly5"
    }
    fn dim(&self) -> usize {
        5
    }
    fn num_constraints(&self) -> usize {
        2
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        x[0] * x[1] * x[2] + 0.25 * x.iter().map(|v| v.powi(4)).sum::<f64>() - x[3] * x[4]
            + self.b.dot(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::from_iterator(5, x.iter().map(|v| v.powi(3)));
        g[0] += x[1] * x[2];
        g[1] += x[0] * x[2];
        g[2] += x[0] * x[1];
        g[3] -= x[4];
        g[4] -= x[3];
        g + &self.b
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h =
            DMatrix::from_diagonal(&DVector::from_iterator(5, x.iter().map(|v| 3.0 * v * v)));
        for (i, j, v) in [(0, 1, x[2]), (0, 2, x[1]), (1, 2, x[0]), (3, 4, -1.0)] {
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
        h
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            x.norm_squared() - 5.0,
            x[0] + x[2] - x[1] * x[4] - 1.0,
        ])
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(2, 5);
        g.row_mut(0).copy_from(&(x.transpose() * 2.0));
        g.row_mut(1).copy_from_slice(&[1.0, -x[4], 1.0, 0.0, -x[1]]);
        g
    }
    fn constraint_hessian(&self, _x: &DVector<f64>, i: usize) -> DMatrix<f64> {
        match i {
            0 => DMatrix::from_diagonal_element(5, 5, 2.0),
            _ => {
                let mut h = DMatrix::zeros(5, 5);
                h[(1, 4)] = -1.0;
                h[(4, 1)] = -1.0;
                h
            }
        }
    }
}

/// Linear objective on the unit sphere: `min b^T x s.t. |x|^2 = 1`.
/// Solution `x = -b/|b|`, `lambda = |b|/2`.
#[derive(Debug, Clone)]
pub struct SphereLinear {
    b: DVector<f64>,
}

impl SphereLinear {
    pub fn new(b: DVector<f64>) -> Self {
        Self { b }
    }

    pub fn solution(&self) -> PrimalDualPoint {
        let n = self.b.norm();
        PrimalDualPoint::new(-&self.b / n, DVector::from_element(1, 0.5 * n))
    }
}

impl EqualityProblem for SphereLinear {
    fn name(&self) -> &str {
        "sphere_linear"
    }
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.b.dot(x)
    }
    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.b.clone()
    }
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(x.len(), x.len())
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x.norm_squared() - 1.0)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, x.len(), (x * 2.0).as_slice())
    }
    fn constraint_hessian(&self, x: &DVector<f64>, _i: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(x.len(), x.len(), 2.0)
    }
}

fn quad_lin() -> ConvexQuadratic {
    let q = DMatrix::from_row_slice(
        4,
        4,
        &[
            4.0, 1.0, 0.0, 0.0, //
            1.0, 3.0, 0.5, 0.0, //
            0.0, 0.5, 2.0, 0.3, //
            0.0, 0.0, 0.3, 1.5,
        ],
    );
    let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 1.0]);
    let a = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 2.0, 0.0]);
    let rhs = DVector::from_vec(vec![1.0, 0.5]);
    ConvexQuadratic::new("quad_lin", q, b, a, rhs)
}

/// Names of the registered suite problems, in suite order.
pub const SUITE_NAMES: [&str; 5] = ["quad_lin", "maratos", "hs6", "poly5", "sphere_linear"];

/// The analytic problem suite. Panics if any reference point fails its
/// KKT-residual check.
pub fn analytic_suite() -> Vec<SuiteEntry> {
    SUITE_NAMES
        .iter()
        .map(|n| problem_by_name(n).expect("suite name is registered"))
        .collect()
}

pub fn problem_by_name(name: &str) -> Result<SuiteEntry> {
    let entry = match name {
        "quad_lin" => {
            let p = quad_lin();
            let star = p.kkt_point().expect("quad_lin KKT matrix is nonsingular");
            SuiteEntry::verified(
                Arc::new(p),
                star,
                PrimalDualPoint::from_slices(&[0.0; 4], &[0.0; 2]),
            )
        }
        "maratos" => SuiteEntry::verified(
            Arc::new(Maratos),
            PrimalDualPoint::from_slices(&[1.0, 0.0], &[-1.5]),
            PrimalDualPoint::from_slices(&[-0.5, 1.0], &[0.0]),
        ),
        "hs6" => SuiteEntry::verified(
            Arc::new(Hs6),
            PrimalDualPoint::from_slices(&[1.0, 1.0], &[0.0]),
            PrimalDualPoint::from_slices(&[-1.2, 1.0], &[0.0]),
        ),
        "poly5" => SuiteEntry::verified(
            Arc::new(Poly5::new()),
            Poly5::solution(),
            PrimalDualPoint::from_slices(&[1.2, 0.8, 1.2, 0.8, 1.1], &[0.0, 0.0]),
        ),
        "sphere_linear" => {
            let p = SphereLinear::new(DVector::from_vec(vec![1.0, 2.0, 2.0]));
            let star = p.solution();
            SuiteEntry::verified(
                Arc::new(p),
                star,
                PrimalDualPoint::from_slices(&[1.0, 0.0, 0.0], &[0.0]),
            )
        }
        other => return Err(SolverError::UnknownProblem(other.to_owned())),
    };
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_norm_sq() -> ConvexQuadratic {
        ConvexQuadratic::new(
            "half_norm",
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, 1.0),
        )
    }

    fn random_point(rng: &mut ChaCha8Rng, d: usize, m: usize) -> PrimalDualPoint {
        PrimalDualPoint::new(
            DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
            DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)),
        )
    }

    #[test]
    fn lagrangian_parts_at_constructed_kkt_point() {
        let p = half_norm_sq();
        let (g, c) = lagrangian_parts(&p, &PrimalDualPoint::from_slices(&[1.0, 0.0], &[-1.0]));
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        assert_eq!(c.as_slice(), &[0.0]);

        let (g, c) = lagrangian_parts(&p, &PrimalDualPoint::from_slices(&[0.0, 0.0], &[0.0]));
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        assert_eq!(c.as_slice(), &[-1.0]);
    }

    #[test]
    fn maratos_hand_check() {
        // grad f(1,0) = (3,0), G = (2,0), 3 + 2 * (-3/2) = 0
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(Maratos.gradient(&x).as_slice(), &[3.0, 0.0]);
        assert_eq!(Maratos.jacobian(&x).as_slice(), &[2.0, 0.0]);
        let (g, c) = lagrangian_parts(
            &Maratos,
            &PrimalDualPoint::from_slices(&[1.0, 0.0], &[-1.5]),
        );
        assert_eq!(g.norm(), 0.0);
        assert_eq!(c.norm(), 0.0);
    }

    #[test]
    fn kkt_residual_examples() {
        let p = half_norm_sq();
        assert_eq!(
            kkt_residual(&p, &PrimalDualPoint::from_slices(&[0.0, 0.0], &[0.0])),
            1.0
        );
        for e in analytic_suite() {
            assert!(
                kkt_residual(e.problem.as_ref(), &e.reference.point) <= 1e-12,
                "{}",
                e.problem.name()
            );
        }
    }

    #[test]
    fn kkt_residual_matches_scratch_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for e in analytic_suite() {
            let prob = e.problem.as_ref();
            for _ in 0..10 {
                let p = random_point(&mut rng, prob.dim(), prob.num_constraints());
                // scratch: loop over components explicitly
                let grad = prob.gradient(&p.x);
                let jac = prob.jacobian(&p.x);
                let c = prob.constraints(&p.x);
                let mut acc = 0.0;
                for j in 0..prob.dim() {
                    let mut gj = grad[j];
                    for i in 0..prob.num_constraints() {
                        gj += jac[(i, j)] * p.lambda[i];
                    }
                    acc += gj * gj;
                }
                for ci in c.iter() {
                    acc += ci * ci;
                }
                let scratch = acc.sqrt();
                let r = kkt_residual(prob, &p);
                assert!(
                    (r - scratch).abs() <= 1e-12 * (1.0 + scratch),
                    "{} {r} {scratch}",
                    prob.name()
                );
            }
        }
    }

    #[test]
    fn two_dim_quadratic_kkt_from_linear_solve() {
        let p = ConvexQuadratic::new(
            "q",
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 2.0),
        );
        let star = p.kkt_point().unwrap();
        assert!((star.x[0] - 1.0).abs() < 1e-14 && (star.x[1] - 1.0).abs() < 1e-14);
        assert!((star.lambda[0] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn suite_has_required_problems() {
        let suite = analytic_suite();
        assert!(suite.len() >= 5);
        let poly = suite.iter().find(|e| e.problem.name() == "poly5").unwrap();
        assert_eq!((poly.problem.dim(), poly.problem.num_constraints()), (5, 2));
        let hs6 = problem_by_name("hs6").unwrap();
        assert!(
            kkt_residual(
                hs6.problem.as_ref(),
                &PrimalDualPoint::from_slices(&[1.0, 1.0], &[0.0])
            ) <= 1e-12
        );
        assert!(matches!(
            problem_by_name("nope"),
            Err(SolverError::UnknownProblem(_))
        ));
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rel = |a: f64, b: f64| (a - b).abs() / (1.0 + a.abs().max(b.abs()));
        for e in analytic_suite() {
            let prob = e.problem.as_ref();
            let (d, m) = (prob.dim(), prob.num_constraints());
            for _ in 0..100 {
                let x = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
                let g = prob.gradient(&x);
                let hf = prob.hessian(&x);
                let jac = prob.jacobian(&x);
                for j in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (prob.objective(&xp) - prob.objective(&xm)) / (2.0 * h);
                    assert!(
                        rel(fd, g[j]) <= 1e-5,
                        "{} grad {j}: {fd} vs {}",
                        prob.name(),
                        g[j]
                    );
                    let gfd = (prob.gradient(&xp) - prob.gradient(&xm)) / (2.0 * h);
                    let cfd = (prob.constraints(&xp) - prob.constraints(&xm)) / (2.0 * h);
                    for i in 0..d {
                        assert!(rel(gfd[i], hf[(i, j)]) <= 1e-5, "{} hess", prob.name());
                    }
                    for i in 0..m {
                        assert!(rel(cfd[i], jac[(i, j)]) <= 1e-5, "{} jac", prob.name());
                        let jfd =
                            (prob.jacobian(&xp).row(i) - prob.jacobian(&xm).row(i)) / (2.0 * h);
                        let hc = prob.constraint_hessian(&x, i);
                        for k in 0..d {
                            assert!(rel(jfd[k], hc[(k, j)]) <= 1e-5, "{} hess c{i}", prob.name());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn hessians_are_symmetric_and_evaluators_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for e in analytic_suite() {
            let prob = e.problem.as_ref();
            let x = DVector::from_fn(prob.dim(), |_, _| rng.random_range(-2.0..2.0));
            let h = prob.hessian(&x);
            assert_eq!(h, h.transpose());
            for i in 0..prob.num_constraints() {
                let hc = prob.constraint_hessian(&x, i);
                assert_eq!(hc, hc.transpose());
            }
            assert_eq!(prob.objective(&x).to_bits(), prob.objective(&x).to_bits());
            assert_eq!(prob.gradient(&x), prob.gradient(&x));
            assert_eq!(prob.jacobian(&x), prob.jacobian(&x));
        }
    }

    #[test]
    fn residual_positive_off_solution_and_licq_holds() {
        for e in analytic_suite() {
            let prob = e.problem.as_ref();
            let mut p = e.reference.point.clone();
            p.x[0] += 0.1;
            assert!(kkt_residual(prob, &p) > 0.0, "{}", prob.name());
            let sv = jacobian_singular_values(prob, &e.reference.point.x);
            assert!(*sv.last().unwrap() > 1e-8, "{} loses rank", prob.name());
        }
    }
}

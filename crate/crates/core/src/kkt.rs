//! Newton KKT system, dual-direction system, and the closed-form merit
//! directional derivative.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};

/// Reciprocal 1-norm condition number below which a system counts as singular.
pub const DEFAULT_RCOND_MIN: f64 = 1e-12;

/// Primal step `dx`, the dual step `dlambda` that the iteration uses, and the
/// multiplier block `dlambda_aux` of the KKT solve (never used for updates).
#[derive(Debug, Clone, PartialEq)]
pub struct SearchDirection {
    pub dx: DVector<f64>,
    pub dlambda: DVector<f64>,
    pub dlambda_aux: DVector<f64>,
}

impl SearchDirection {
    /// Norm of the stacked `(dx, dlambda)`.
    pub fn norm(&self) -> f64 {
        (self.dx.norm_squared() + self.dlambda.norm_squared()).sqrt()
    }

    /// Stacked `(dx, dlambda)`.
    pub fn stacked(&self) -> DVector<f64> {
        let (d, m) = (self.dx.len(), self.dlambda.len());
        let mut v = DVector::zeros(d + m);
        v.rows_mut(0, d).copy_from(&self.dx);
        v.rows_mut(d, m).copy_from(&self.dlambda);
        v
    }
}

/// LU solve with partial pivoting that refuses ill-conditioned matrices.
pub(crate) fn guarded_solve(
    a: DMatrix<f64>,
    rhs: &DVector<f64>,
    rcond_min: f64,
) -> Result<DVector<f64>> {
    let norm1 = one_norm(&a);
    let lu = a.lu();
    let inv = lu
        .try_inverse()
        .ok_or(SolverError::SingularKkt { rcond: 0.0 })?;
    let rcond = 1.0 / (norm1 * one_norm(&inv));
    if !(rcond >= rcond_min) {
        return Err(SolverError::SingularKkt {
            rcond: if rcond.is_nan() { 0.0 } else { rcond },
        });
    }
    Ok(inv * rhs)
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `[B G^T; G 0] (dx, dlambda_aux) = -(grad_l, c)`.
pub fn solve_kkt(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    solve_kkt_with(b, g, grad_l, c, DEFAULT_RCOND_MIN)
}

pub fn solve_kkt_with(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    c: &DVector<f64>,
    rcond_min: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (m, d) = g.shape();
    if b.shape() != (d, d) || grad_l.len() != d || c.len() != m {
        return Err(SolverError::Dimension(format!(
            "KKT blocks: B {:?}, G {:?}, grad {}, c {}",
            b.shape(),
            g.shape(),
            grad_l.len(),
            c.len()
        )));
    }
    let mut k = DMatrix::zeros(d + m, d + m);
    k.view_mut((0, 0), (d, d)).copy_from(b);
    k.view_mut((0, d), (d, m)).copy_from(&g.transpose());
    k.view_mut((d, 0), (m, d)).copy_from(g);
    let mut rhs = DVector::zeros(d + m);
    rhs.rows_mut(0, d).copy_from(&(-grad_l));
    rhs.rows_mut(d, m).copy_from(&(-c));
    let sol = guarded_solve(k, &rhs, rcond_min)?;
    Ok((sol.rows(0, d).into_owned(), sol.rows(d, m).into_owned()))
}

/// Solves `G G^T dlambda = -(G grad_l + M^T dx)`.
pub fn solve_dual(
    g: &DMatrix<f64>,
    m: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    dx: &DVector<f64>,
) -> Result<DVector<f64>> {
    solve_dual_with(g, m, grad_l, dx, DEFAULT_RCOND_MIN)
}

pub fn solve_dual_with(
    g: &DMatrix<f64>,
    m: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    dx: &DVector<f64>,
    rcond_min: f64,
) -> Result<DVector<f64>> {
    let ggt = g * g.transpose();
    let rhs = -(g * grad_l + m.tr_mul(dx));
    guarded_solve(ggt, &rhs, rcond_min)
}

/// Full search direction: KKT solve for `dx`, then the dual system with `M`.
pub fn compute_direction(
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    grad_l: &DVector<f64>,
    c: &DVector<f64>,
    m: &DMatrix<f64>,
    rcond_min: f64,
) -> Result<SearchDirection> {
    let (dx, dlambda_aux) = solve_kkt_with(b, g, grad_l, c, rcond_min)?;
    let dlambda = solve_dual_with(g, m, grad_l, &dx, rcond_min)?;
    Ok(SearchDirection {
        dx,
        dlambda,
        dlambda_aux,
    })
}

/// `-dx^T B dx + c^T (dlambda + dlambda_aux) - mu |c|^2 - nu |G grad_x L|^2`,
/// the merit directional derivative along a direction from [`compute_direction`].
#[allow(clippy::too_many_arguments)]
pub fn directional_derivative_closed_form(
    b: &DMatrix<f64>,
    dx: &DVector<f64>,
    c: &DVector<f64>,
    dlambda: &DVector<f64>,
    dlambda_aux: &DVector<f64>,
    mu: f64,
    nu: f64,
    g_norm_sq: f64,
) -> f64 {
    -dx.dot(&(b * dx)) + c.dot(&(dlambda + dlambda_aux)) - mu * c.norm_squared() - nu * g_norm_sq
}

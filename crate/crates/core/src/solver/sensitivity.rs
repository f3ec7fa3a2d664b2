//! Parametric sensitivity of an optimal primal-dual point.
//!
//! At a solution with active set A the reduced KKT matrix
//!
//! ```text
//! K = [ H    Jh'  JA' ]
//!     [ Jh   0    0   ]
//!     [ JA   0    0   ]
//! ```
//!
//! is factored once. Directional derivatives of (w*, lambda*, mu_A*) along a
//! parameter change dp solve K d = -[d(grad L)/dp; dh/dp; dgA/dp] dp. Active
//! variable bounds do not depend on the parameters, so those variables are
//! fixed (identity rows); inactive inequalities are dropped (identity rows).
//! Constraints whose every variable with a nonzero coefficient is fixed by an
//! active bound are implied by the bounds (for example non-anticipativity
//! pairs between two copies of an input that sits on its bound). They are
//! dropped as well, which restores a nonsingular matrix when LICQ fails only
//! through such duplicates.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::ipm::KktStructure;
use super::ldl::NumericLdl;
use super::{Nlp, PrimalDualSolution};
use crate::error::SolverError;

/// Sparse derivatives of the KKT residual pieces with respect to each parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamJacobian {
    /// dgrad[k] = entries of d(grad_w L)/dp_k.
    pub dgrad: Vec<Vec<(usize, f64)>>,
    /// dh[k] = entries of dh/dp_k.
    pub dh: Vec<Vec<(usize, f64)>>,
    /// dg[k] = entries of dg/dp_k.
    pub dg: Vec<Vec<(usize, f64)>>,
}

/// An NLP whose data depend on a parameter vector p.
pub trait ParametricNlp: Nlp {
    fn param(&self) -> Vec<f64>;
    fn param_jacobian(&self, w: &[f64], lam_eq: &[f64], mu: &[f64]) -> ParamJacobian;
}

/// Factored sensitivity system at (w*, p0).
pub struct SensitivityOperator {
    kkt: Arc<KktStructure>,
    factor: NumericLdl,
    values: Vec<f64>,
    p0: Vec<f64>,
    pjac: ParamJacobian,
    fixed: Vec<bool>,
    active: Vec<bool>,
    /// Equality rows implied by active bounds.
    dropped_eq: Vec<bool>,
    obj_scale: f64,
    eq_scale: Vec<f64>,
    ineq_scale: Vec<f64>,
    /// Set when strict complementarity is weak at the solution.
    pub sc_warning: bool,
    pub sc_margin: f64,
}

pub const SC_THRESHOLD: f64 = 1e-8;

/// Builds and factors the sensitivity system at a solution.
pub fn sensitivity<P: ParametricNlp + ?Sized>(
    p: &P,
    sol: &PrimalDualSolution,
) -> Result<SensitivityOperator, SolverError> {
    sensitivity_with(p, sol, Arc::new(KktStructure::new(p)))
}

pub(crate) fn sensitivity_with<P: ParametricNlp + ?Sized>(
    p: &P,
    sol: &PrimalDualSolution,
    kkt: Arc<KktStructure>,
) -> Result<SensitivityOperator, SolverError> {
    let (n, me, mi) = (kkt.n, kkt.me, kkt.mi);
    let mut grad = vec![0.0; n];
    let mut je = vec![0.0; kkt.jac_eq_pat.len()];
    let mut ji = vec![0.0; kkt.jac_in_pat.len()];
    let mut hs = vec![0.0; kkt.hess_pat.len()];
    p.eval_derivs(&sol.w, 1.0, &sol.lam_eq, &sol.mu, &mut grad, &mut je, &mut ji, &mut hs);
    if hs.iter().chain(&je).chain(&ji).any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let mut fixed = vec![false; n];
    for &i in sol.active_lower.iter().chain(&sol.active_upper) {
        fixed[i] = true;
    }
    let mut active = vec![false; mi];
    for &r in &sol.active_ineq {
        active[r] = true;
    }
    let mut free_eq = vec![false; me];
    for (k, &(r, c)) in kkt.jac_eq_pat.iter().enumerate() {
        free_eq[r] |= !fixed[c] && je[k] != 0.0;
    }
    let dropped_eq: Vec<bool> = free_eq.iter().map(|f| !f).collect();
    let mut free_in = vec![false; mi];
    for (k, &(r, c)) in kkt.jac_in_pat.iter().enumerate() {
        free_in[r] |= !fixed[c] && ji[k] != 0.0;
    }
    for r in 0..mi {
        active[r] &= free_in[r];
    }
    let sf = sol.obj_scale;
    let mut values = vec![0.0; kkt.n_slots];
    for (k, &(i, j)) in kkt.hess_pat.iter().enumerate() {
        if !fixed[i] && !fixed[j] {
            values[kkt.hess_slot[k]] += sf * hs[k];
        }
    }
    for i in 0..n {
        if fixed[i] {
            values[i] = 1.0;
        }
    }
    for (k, &(r, c)) in kkt.jac_eq_pat.iter().enumerate() {
        if !fixed[c] {
            values[kkt.jac_eq_slot[k]] += sol.eq_scale[r] * je[k];
        }
    }
    for (k, &(r, c)) in kkt.jac_in_pat.iter().enumerate() {
        if active[r] && !fixed[c] {
            values[kkt.jac_in_slot[k]] += sol.ineq_scale[r] * ji[k];
        }
    }
    for r in 0..me {
        if dropped_eq[r] {
            values[n + r] = -1.0;
        }
    }
    for r in 0..mi {
        if !active[r] {
            values[n + me + r] = -1.0;
        }
    }
    let factor = kkt.factor_regularized(&values);
    if factor.n_tiny > 0 {
        return Err(SolverError::SingularKkt(format!("{} zero pivots", factor.n_tiny)));
    }
    if factor.n_neg != me + mi {
        return Err(SolverError::SingularKkt(format!(
            "inertia ({}, {}) differs from ({n}, {})",
            factor.n_pos,
            factor.n_neg,
            me + mi
        )));
    }
    // A nearly singular matrix survives the regularized factorization but
    // iterative refinement against the exact matrix then fails to converge.
    let dim = kkt.dim();
    let probe: Vec<f64> = (0..dim).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let mut x = vec![0.0; dim];
    let res = kkt.symbolic.solve_refined(&factor, &values, &probe, &mut x, 5);
    if !(res < 1e-8) {
        return Err(SolverError::SingularKkt(format!("refinement residual {res:e}")));
    }
    let pjac = p.param_jacobian(&sol.w, &sol.lam_eq, &sol.mu);
    Ok(SensitivityOperator {
        kkt,
        factor,
        values,
        p0: p.param(),
        pjac,
        fixed,
        active,
        dropped_eq,
        obj_scale: sf,
        eq_scale: sol.eq_scale.clone(),
        ineq_scale: sol.ineq_scale.clone(),
        sc_warning: sol.sc_margin < SC_THRESHOLD,
        sc_margin: sol.sc_margin,
    })
}

impl SensitivityOperator {
    pub fn n_param(&self) -> usize {
        self.p0.len()
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    /// Primal directional derivative dw*/dp * dp (one back-substitution).
    pub fn direction(&self, dp: &[f64]) -> Vec<f64> {
        let (n, me) = (self.kkt.n, self.kkt.me);
        let dim = self.kkt.dim();
        let mut rhs = vec![0.0; dim];
        for (k, &d) in dp.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for &(i, v) in &self.pjac.dgrad[k] {
                if !self.fixed[i] {
                    rhs[i] -= self.obj_scale * v * d;
                }
            }
            for &(r, v) in &self.pjac.dh[k] {
                if !self.dropped_eq[r] {
                    rhs[n + r] -= self.eq_scale[r] * v * d;
                }
            }
            for &(r, v) in &self.pjac.dg[k] {
                if self.active[r] {
                    rhs[n + me + r] -= self.ineq_scale[r] * v * d;
                }
            }
        }
        let mut x = vec![0.0; dim];
        self.kkt.symbolic.solve_refined(&self.factor, &self.values, &rhs, &mut x, 3);
        x.truncate(n);
        x
    }

    /// Full primal sensitivity matrix dw*/dp (n x n_p).
    pub fn jacobian(&self) -> DMatrix<f64> {
        let np = self.n_param();
        let mut m = DMatrix::zeros(self.kkt.n, np);
        for k in 0..np {
            let mut e = vec![0.0; np];
            e[k] = 1.0;
            let col = self.direction(&e);
            for i in 0..self.kkt.n {
                m[(i, k)] = col[i];
            }
        }
        m
    }
}

/// First-order predictor w*(p_new) ~ w*(p0) + dw*/dp (p_new - p0).
pub fn predict(op: &SensitivityOperator, sol: &PrimalDualSolution, p_new: &[f64]) -> Vec<f64> {
    let dp: Vec<f64> = p_new.iter().zip(&op.p0).map(|(a, b)| a - b).collect();
    if dp.iter().all(|&v| v == 0.0) {
        return sol.w.clone();
    }
    let d = op.direction(&dp);
    sol.w.iter().zip(&d).map(|(a, b)| a + b).collect()
}

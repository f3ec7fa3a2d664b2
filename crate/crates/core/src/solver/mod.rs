//! Embedded NLP solver and parametric sensitivity.
//!
//! Problems have the form
//!
//! ```text
//! min f(w)  s.t.  h(w) = 0,  g(w) <= 0,  lo <= w <= up
//! ```
//!
//! with Lagrangian L = f + lambda' h + mu' g (+ bound terms). The solver is a
//! primal-dual interior-point method; [`sensitivity`] differentiates the
//! optimal primal-dual point with respect to parameters entering the problem.

pub mod ipm;
pub mod ldl;
pub mod sensitivity;

pub use ipm::solve;
pub use sensitivity::{predict, sensitivity, SensitivityOperator};

use serde::{Deserialize, Serialize};

/// A smooth NLP with sparse first and second derivatives.
pub trait Nlp {
    fn n(&self) -> usize;
    fn m_eq(&self) -> usize;
    fn m_ineq(&self) -> usize;
    /// Variable bounds; infinite entries mean unbounded.
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn initial_point(&self) -> Vec<f64>;
    /// (row, col) of every structural nonzero of dh/dw.
    fn jac_eq_pattern(&self) -> Vec<(usize, usize)>;
    /// (row, col) of every structural nonzero of dg/dw.
    fn jac_ineq_pattern(&self) -> Vec<(usize, usize)>;
    /// (i, j) with i <= j of every structural nonzero of the Lagrangian Hessian.
    fn hess_pattern(&self) -> Vec<(usize, usize)>;
    /// Objective value; fills h and g.
    fn eval_values(&self, w: &[f64], h: &mut [f64], g: &mut [f64]) -> f64;
    /// Objective gradient, Jacobian values (pattern order) and the Hessian of
    /// obj_factor * f + lam_eq' h + lam_ineq' g (pattern order).
    #[allow(clippy::too_many_arguments)]
    fn eval_derivs(
        &self,
        w: &[f64],
        obj_factor: f64,
        lam_eq: &[f64],
        lam_ineq: &[f64],
        grad: &mut [f64],
        jac_eq: &mut [f64],
        jac_ineq: &mut [f64],
        hess: &mut [f64],
    );
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Tolerance on the scaled optimality error.
    pub tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    /// Initial barrier parameter when a warm start is supplied.
    pub warm_mu_init: f64,
    /// Relative push of the initial point into the bounds.
    pub bound_push: f64,
    pub warm_bound_push: f64,
    /// Active-set threshold on constraint values.
    pub act_tol: f64,
    /// Multipliers above this threshold mark a constraint active.
    pub act_mult_tol: f64,
    /// Gradient-based scaling of objective and constraint rows.
    pub scaling: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            mu_init: 0.1,
            warm_mu_init: 1e-2,
            bound_push: 1e-2,
            warm_bound_push: 1e-5,
            act_tol: 1e-6,
            act_mult_tol: 1e-6,
            scaling: true,
        }
    }
}

/// Primal-dual starting point.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub w: Vec<f64>,
    pub lam_eq: Option<Vec<f64>>,
    pub lam_ineq: Option<Vec<f64>>,
    pub z_lower: Option<Vec<f64>>,
    pub z_upper: Option<Vec<f64>>,
}

/// Infinity norms of the KKT residual pieces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktNorms {
    pub stationarity: f64,
    pub eq_feasibility: f64,
    pub ineq_feasibility: f64,
    pub complementarity: f64,
}

impl KktNorms {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.eq_feasibility).max(self.ineq_feasibility).max(self.complementarity)
    }
}

/// Solution of an NLP together with its multipliers and active set.
#[derive(Clone, Debug)]
pub struct PrimalDualSolution {
    pub w: Vec<f64>,
    /// Multipliers of h(w) = 0.
    pub lam_eq: Vec<f64>,
    /// Multipliers of g(w) <= 0 (nonnegative).
    pub mu: Vec<f64>,
    /// Multipliers of w >= lo and w <= up (nonnegative).
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    /// Inequality values at w.
    pub g: Vec<f64>,
    pub active_ineq: Vec<usize>,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub kkt: KktNorms,
    /// min over active constraints of (multiplier + |constraint|).
    pub sc_margin: f64,
    /// Scaling used internally (objective factor, equality rows, inequality rows).
    pub obj_scale: f64,
    pub eq_scale: Vec<f64>,
    pub ineq_scale: Vec<f64>,
}

/// Unscaled KKT residual norms of a primal-dual point.
///
/// Bounds are treated as inequalities with multipliers z_lower, z_upper.
#[allow(clippy::too_many_arguments)]
pub fn kkt_norms<P: Nlp + ?Sized>(
    p: &P,
    w: &[f64],
    lam_eq: &[f64],
    mu: &[f64],
    z_lower: &[f64],
    z_upper: &[f64],
) -> KktNorms {
    let (n, me, mi) = (p.n(), p.m_eq(), p.m_ineq());
    let (lo, up) = p.var_bounds();
    let mut h = vec![0.0; me];
    let mut g = vec![0.0; mi];
    p.eval_values(w, &mut h, &mut g);
    let jep = p.jac_eq_pattern();
    let jip = p.jac_ineq_pattern();
    let mut grad = vec![0.0; n];
    let mut je = vec![0.0; jep.len()];
    let mut ji = vec![0.0; jip.len()];
    let mut hs = vec![0.0; p.hess_pattern().len()];
    p.eval_derivs(w, 1.0, lam_eq, mu, &mut grad, &mut je, &mut ji, &mut hs);
    let mut r = grad;
    for (k, &(row, col)) in jep.iter().enumerate() {
        r[col] += je[k] * lam_eq[row];
    }
    for (k, &(row, col)) in jip.iter().enumerate() {
        r[col] += ji[k] * mu[row];
    }
    for i in 0..n {
        r[i] += z_upper[i] - z_lower[i];
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut ineq: f64 = g.iter().fold(0.0f64, |m, x| m.max(x.max(0.0)));
    let mut comp: f64 = g.iter().zip(mu).fold(0.0f64, |m, (gv, mv)| m.max((gv * mv).abs()));
    for i in 0..n {
        if lo[i].is_finite() {
            ineq = ineq.max(lo[i] - w[i]);
            comp = comp.max(((w[i] - lo[i]) * z_lower[i]).abs());
        }
        if up[i].is_finite() {
            ineq = ineq.max(w[i] - up[i]);
            comp = comp.max(((up[i] - w[i]) * z_upper[i]).abs());
        }
    }
    KktNorms { stationarity: inf(&r), eq_feasibility: inf(&h), ineq_feasibility: ineq.max(0.0), complementarity: comp }
}

#[cfg(test)]
pub(crate) mod test_problems {
    use super::*;

    /// Dense-coded small problems for solver tests.
    pub struct Quadratic {
        /// Full symmetric H.
        pub h: Vec<Vec<f64>>,
        pub c: Vec<f64>,
        /// Equality rows a' w = b.
        pub a_eq: Vec<(Vec<f64>, f64)>,
        /// Inequality rows a' w <= b.
        pub a_in: Vec<(Vec<f64>, f64)>,
        pub lo: Vec<f64>,
        pub up: Vec<f64>,
        pub start: Vec<f64>,
    }

    impl Quadratic {
        pub fn unconstrained(h: Vec<Vec<f64>>, c: Vec<f64>) -> Self {
            let n = c.len();
            Self {
                h,
                c,
                a_eq: vec![],
                a_in: vec![],
                lo: vec![f64::NEG_INFINITY; n],
                up: vec![f64::INFINITY; n],
                start: vec![0.0; n],
            }
        }
    }

    fn dense_pattern(rows: usize, n: usize) -> Vec<(usize, usize)> {
        (0..rows).flat_map(|r| (0..n).map(move |c| (r, c))).collect()
    }

    impl Nlp for Quadratic {
        fn n(&self) -> usize {
            self.c.len()
        }
        fn m_eq(&self) -> usize {
            self.a_eq.len()
        }
        fn m_ineq(&self) -> usize {
            self.a_in.len()
        }
        fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lo.clone(), self.up.clone())
        }
        fn initial_point(&self) -> Vec<f64> {
            self.start.clone()
        }
        fn jac_eq_pattern(&self) -> Vec<(usize, usize)> {
            dense_pattern(self.m_eq(), self.n())
        }
        fn jac_ineq_pattern(&self) -> Vec<(usize, usize)> {
            dense_pattern(self.m_ineq(), self.n())
        }
        fn hess_pattern(&self) -> Vec<(usize, usize)> {
            let n = self.n();
            (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
        }
        fn eval_values(&self, w: &[f64], h: &mut [f64], g: &mut [f64]) -> f64 {
            for (r, (a, b)) in self.a_eq.iter().enumerate() {
                h[r] = a.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - b;
            }
            for (r, (a, b)) in self.a_in.iter().enumerate() {
                g[r] = a.iter().zip(w).map(|(x, y)| x * y).sum::<f64>() - b;
            }
            let n = self.n();
            let mut f = 0.0;
            for i in 0..n {
                f += self.c[i] * w[i];
                for j in 0..n {
                    f += 0.5 * w[i] * self.h[i][j] * w[j];
                }
            }
            f
        }
        fn eval_derivs(
            &self,
            w: &[f64],
            obj_factor: f64,
            _lam_eq: &[f64],
            _lam_ineq: &[f64],
            grad: &mut [f64],
            jac_eq: &mut [f64],
            jac_ineq: &mut [f64],
            hess: &mut [f64],
        ) {
            let n = self.n();
            for i in 0..n {
                grad[i] = self.c[i] + (0..n).map(|j| self.h[i][j] * w[j]).sum::<f64>();
            }
            for (r, (a, _)) in self.a_eq.iter().enumerate() {
                jac_eq[r * n..(r + 1) * n].copy_from_slice(a);
            }
            for (r, (a, _)) in self.a_in.iter().enumerate() {
                jac_ineq[r * n..(r + 1) * n].copy_from_slice(a);
            }
            let mut k = 0;
            for i in 0..n {
                for j in i..n {
                    hess[k] = obj_factor * self.h[i][j];
                    k += 1;
                }
            }
        }
    }
}

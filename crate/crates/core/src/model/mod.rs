//! Uncertain nonlinear systems: continuous dynamics, stage cost, bounds and the
//! finite set of parameter realizations, discretized by fixed-step RK4.

pub mod builtin;
pub mod dual;

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

pub use dual::{Dual2, Scalar};

use crate::error::ModelError;

/// Reference data the stage cost is evaluated against.
///
/// `setpoint` carries the tracked targets (model specific), `x_reg` the anchor
/// of the state regularization term used by some examples and `reg_weight`
/// overrides the model's regularization weight.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostRefs {
    pub setpoint: Vec<f64>,
    pub x_reg: Vec<f64>,
    pub reg_weight: Option<f64>,
}

/// Model equations written once against a generic scalar.
pub trait Equations: Send + Sync + fmt::Debug {
    /// Continuous-time right-hand side dx/dt = f_c(x, u, d).
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]);

    /// Stage cost. `du` is the input increment u - u_prev when the model
    /// penalizes control movement; `None` means no increment is available.
    fn stage_cost<S: Scalar>(&self, x: &[S], u: &[S], du: Option<&[S]>, refs: &CostRefs) -> S;
}

/// Object-safe evaluation of the equations for one scalar type.
pub trait Eval<S> {
    fn rhs_s(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]);
    fn cost_s(&self, x: &[S], u: &[S], du: Option<&[S]>, refs: &CostRefs) -> S;
}

impl<T: Equations, S: Scalar> Eval<S> for T {
    #[inline]
    fn rhs_s(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]) {
        self.rhs(x, u, d, dx)
    }
    #[inline]
    fn cost_s(&self, x: &[S], u: &[S], du: Option<&[S]>, refs: &CostRefs) -> S {
        self.stage_cost(x, u, du, refs)
    }
}

/// Largest number of seeded variables supported by derivative evaluation.
pub const MAX_AD_DIM: usize = 10;

/// Equations usable behind a trait object with f64 and every dual dimension.
pub trait ModelEquations:
    Eval<f64>
    + Eval<Dual2<1>>
    + Eval<Dual2<2>>
    + Eval<Dual2<3>>
    + Eval<Dual2<4>>
    + Eval<Dual2<5>>
    + Eval<Dual2<6>>
    + Eval<Dual2<7>>
    + Eval<Dual2<8>>
    + Eval<Dual2<9>>
    + Eval<Dual2<10>>
    + Send
    + Sync
    + fmt::Debug
{
}

impl<T: Equations> ModelEquations for T {}

/// Calls `$f::<N>(args..)` with `N` equal to the runtime dimension `$n`.
#[macro_export]
macro_rules! dispatch_dim {
    ($n:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $n {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            5 => $f::<5>($($arg),*),
            6 => $f::<6>($($arg),*),
            7 => $f::<7>($($arg),*),
            8 => $f::<8>($($arg),*),
            9 => $f::<9>($($arg),*),
            10 => $f::<10>($($arg),*),
            n => panic!("derivative dimension {n} exceeds the supported maximum"),
        }
    };
}

/// One parameter realization d^r with its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub label: String,
    pub d: Vec<f64>,
    pub prob: f64,
}

/// An uncertain discrete-time system x+ = f(x, u, d) obtained by RK4.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_d: usize,
    pub x_bounds: Vec<(f64, f64)>,
    pub u_bounds: Vec<(f64, f64)>,
    pub realizations: Vec<Realization>,
    pub nominal_index: usize,
    /// Sample time in the time unit of the equations.
    pub dt: f64,
    /// RK4 steps per sample interval.
    pub substeps: usize,
    /// Typical magnitudes used to scale NLP variables and dynamics rows.
    pub x_scale: Vec<f64>,
    pub u_scale: Vec<f64>,
    /// Whether the stage cost uses the input increment.
    pub uses_du: bool,
    pub refs: CostRefs,
    pub equations: Arc<dyn ModelEquations>,
}

impl SystemModel {
    /// Checks dimensions, bounds and realization probabilities.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Invalid(msg));
        if self.x_bounds.len() != self.n_x || self.u_bounds.len() != self.n_u {
            return bad("bound vectors do not match n_x / n_u".into());
        }
        for (i, (lo, hi)) in self.x_bounds.iter().chain(self.u_bounds.iter()).enumerate() {
            if !(lo <= hi) {
                return bad(format!("empty bound interval at index {i}"));
            }
        }
        if self.realizations.is_empty() || self.nominal_index >= self.realizations.len() {
            return bad("nominal_index does not address a realization".into());
        }
        let total: f64 = self.realizations.iter().map(|r| r.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("realization probabilities sum to {total}"));
        }
        if self.realizations.iter().any(|r| r.d.len() != self.n_d || r.prob < 0.0) {
            return bad("realization with wrong length or negative probability".into());
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return bad("sample time must be positive".into());
        }
        if self.x_scale.len() != self.n_x || self.u_scale.len() != self.n_u {
            return bad("scale vectors do not match n_x / n_u".into());
        }
        Ok(())
    }

    pub fn n_realizations(&self) -> usize {
        self.realizations.len()
    }

    pub fn nominal(&self) -> &[f64] {
        &self.realizations[self.nominal_index].d
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.realizations.iter().map(|r| r.prob).collect()
    }

    pub fn x_lower(&self) -> Vec<f64> {
        self.x_bounds.iter().map(|b| b.0).collect()
    }

    pub fn x_upper(&self) -> Vec<f64> {
        self.x_bounds.iter().map(|b| b.1).collect()
    }

    pub fn u_in_bounds(&self, u: &[f64], tol: f64) -> bool {
        u.iter().zip(&self.u_bounds).all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }

    pub fn x_in_bounds(&self, x: &[f64], tol: f64) -> bool {
        x.iter().zip(&self.x_bounds).all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }

    fn check_dims(&self, x: usize, u: usize, d: usize) -> Result<(), ModelError> {
        if x != self.n_x || u != self.n_u || d != self.n_d {
            return Err(ModelError::Dimension { expected: (self.n_x, self.n_u, self.n_d), got: (x, u, d) });
        }
        Ok(())
    }

    /// Continuous-time right-hand side in f64.
    pub fn rhs(&self, x: &[f64], u: &[f64], d: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_x];
        Eval::<f64>::rhs_s(&*self.equations, x, u, d, &mut dx);
        dx
    }

    /// Discrete-time map x+ = f(x, u, d) by RK4 over one sample interval.
    pub fn step(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dims(x.len(), u.len(), d.len())?;
        let next = rk4(&*self.equations, x, u, d, self.dt, self.substeps);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::IntegrationFailure { model: self.name.clone() });
        }
        Ok(next)
    }

    /// Stage cost in f64.
    pub fn stage_cost(&self, x: &[f64], u: &[f64], du: Option<&[f64]>, refs: &CostRefs) -> f64 {
        Eval::<f64>::cost_s(&*self.equations, x, u, du, refs)
    }

    /// Jacobians (A, B) of the discrete map at (x, u) computed by AD through RK4.
    pub fn linearize(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        self.check_dims(x.len(), u.len(), d.len())?;
        let d = step_derivatives(self, x, u, d);
        let n_x = self.n_x;
        let a = DMatrix::from_fn(n_x, n_x, |i, j| d.jac[i][j]);
        let b = DMatrix::from_fn(n_x, self.n_u, |i, j| d.jac[i][n_x + j]);
        Ok((a, b))
    }
}

/// Fixed-step classical RK4 for any scalar type.
pub fn rk4<S: Scalar, E: Eval<S> + ?Sized>(eq: &E, x: &[S], u: &[S], d: &[f64], dt: f64, substeps: usize) -> Vec<S> {
    let n = x.len();
    let h = dt / substeps as f64;
    let mut x = x.to_vec();
    let mut k1 = vec![S::zero(); n];
    let mut k2 = vec![S::zero(); n];
    let mut k3 = vec![S::zero(); n];
    let mut k4 = vec![S::zero(); n];
    let mut tmp = vec![S::zero(); n];
    for _ in 0..substeps {
        eq.rhs_s(&x, u, d, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + k1[i] * (0.5 * h);
        }
        eq.rhs_s(&tmp, u, d, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + k2[i] * (0.5 * h);
        }
        eq.rhs_s(&tmp, u, d, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + k3[i] * h;
        }
        eq.rhs_s(&tmp, u, d, &mut k4);
        for i in 0..n {
            x[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
        }
    }
    x
}

/// Value, Jacobian and per-output Hessians of the discrete map with respect to
/// the stacked vector (x, u).
#[derive(Clone, Debug)]
pub struct StepDerivatives {
    pub value: Vec<f64>,
    /// jac[i][j] = d f_i / d v_j with v = (x, u).
    pub jac: Vec<Vec<f64>>,
    /// hess[i] is the (n_x + n_u)^2 row-major Hessian of output i.
    pub hess: Vec<Vec<f64>>,
}

fn step_derivs_n<const N: usize>(model: &SystemModel, x: &[f64], u: &[f64], d: &[f64]) -> StepDerivatives
where
    dyn ModelEquations: Eval<Dual2<N>>,
{
    let n_x = model.n_x;
    let mut seed = Vec::with_capacity(N);
    seed.extend_from_slice(x);
    seed.extend_from_slice(u);
    let vars = Dual2::<N>::vars(&seed);
    let out = rk4(&*model.equations, &vars[..n_x], &vars[n_x..], d, model.dt, model.substeps);
    StepDerivatives {
        value: out.iter().map(|o| o.v).collect(),
        jac: out.iter().map(|o| o.g.to_vec()).collect(),
        hess: out.iter().map(|o| o.h.iter().flatten().copied().collect()).collect(),
    }
}

/// Derivatives of the discrete map through RK4 by second-order forward AD.
pub fn step_derivatives(model: &SystemModel, x: &[f64], u: &[f64], d: &[f64]) -> StepDerivatives {
    dispatch_dim!(model.n_x + model.n_u, step_derivs_n(model, x, u, d))
}

/// Value, gradient and Hessian of the stage cost with respect to (x, u, u_prev).
#[derive(Clone, Debug)]
pub struct CostDerivatives {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Row-major square Hessian of dimension n_x + 2 n_u.
    pub hess: Vec<f64>,
}

fn cost_derivs_n<const N: usize>(
    model: &SystemModel,
    x: &[f64],
    u: &[f64],
    u_prev: Option<&[f64]>,
    refs: &CostRefs,
) -> CostDerivatives
where
    dyn ModelEquations: Eval<Dual2<N>>,
{
    let (n_x, n_u) = (model.n_x, model.n_u);
    let mut seed = Vec::with_capacity(N);
    seed.extend_from_slice(x);
    seed.extend_from_slice(u);
    seed.extend_from_slice(u_prev.unwrap_or(u));
    let vars = Dual2::<N>::vars(&seed);
    let xs = &vars[..n_x];
    let us = &vars[n_x..n_x + n_u];
    let du: Vec<Dual2<N>> = (0..n_u).map(|j| vars[n_x + j] - vars[n_x + n_u + j]).collect();
    let duo = if model.uses_du && u_prev.is_some() { Some(du.as_slice()) } else { None };
    let c = Eval::<Dual2<N>>::cost_s(&*model.equations, xs, us, duo, refs);
    CostDerivatives { value: c.v, grad: c.g.to_vec(), hess: c.h.iter().flatten().copied().collect() }
}

/// Derivatives of the stage cost by second-order forward AD. Without `u_prev`
/// the increment term is omitted and the u_prev block is zero.
pub fn cost_derivatives(
    model: &SystemModel,
    x: &[f64],
    u: &[f64],
    u_prev: Option<&[f64]>,
    refs: &CostRefs,
) -> CostDerivatives {
    dispatch_dim!(model.n_x + 2 * model.n_u, cost_derivs_n(model, x, u, u_prev, refs))
}

/// Stage cost including the increment term when the model uses it.
pub fn stage_cost_with_prev(model: &SystemModel, x: &[f64], u: &[f64], u_prev: &[f64], refs: &CostRefs) -> f64 {
    if model.uses_du {
        let du: Vec<f64> = u.iter().zip(u_prev).map(|(a, b)| a - b).collect();
        model.stage_cost(x, u, Some(&du), refs)
    } else {
        model.stage_cost(x, u, None, refs)
    }
}

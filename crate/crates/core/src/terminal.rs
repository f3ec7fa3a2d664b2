//! Offline terminal ingredients: optimal equilibrium pairs, deviation
//! coordinates, LQR gains with Riccati/Lyapunov matrices, sampled
//! linearization-error bounds and terminal radii.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, TerminalError};
use crate::linalg;
use crate::model::{cost_derivatives, step_derivatives, CostRefs, SystemModel};
use crate::solver::{self, Nlp, SolverOptions, WarmStart};

/// How the local control laws are chosen across realizations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainMode {
    /// One LQR gain per realization (robust-horizon formulation).
    IndependentGains,
    /// The nominal LQR gain for every realization (fully branched formulation).
    CommonGain,
}

/// Optimal steady state (x_f, u_f) of one realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPair {
    pub realization: usize,
    pub x_f: Vec<f64>,
    pub u_f: Vec<f64>,
    pub d: Vec<f64>,
    /// max |x_f - f(x_f, u_f, d)|.
    pub residual: f64,
}

/// Cost references of the realization-specific stage cost: the regularization
/// anchor, if the model has one, moves to the realization's equilibrium and the
/// model's own regularization weight applies.
pub fn stage_refs(base: &CostRefs, x_f: &[f64]) -> CostRefs {
    CostRefs {
        setpoint: base.setpoint.clone(),
        x_reg: if base.x_reg.is_empty() { Vec::new() } else { x_f.to_vec() },
        reg_weight: None,
    }
}

/// Steady-state problem min l(x, u) s.t. x = f(x, u, d), bounds; variables are
/// scaled by the model's typical magnitudes.
struct SteadyState<'a> {
    model: &'a SystemModel,
    d: Vec<f64>,
    refs: CostRefs,
    start: Vec<f64>,
    scale: Vec<f64>,
}

impl SteadyState<'_> {
    fn unscale(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_x = self.model.n_x;
        let v: Vec<f64> = w.iter().zip(&self.scale).map(|(a, s)| a * s).collect();
        (v[..n_x].to_vec(), v[n_x..].to_vec())
    }
}

impl Nlp for SteadyState<'_> {
    fn n(&self) -> usize {
        self.model.n_x + self.model.n_u
    }
    fn m_eq(&self) -> usize {
        self.model.n_x
    }
    fn m_ineq(&self) -> usize {
        0
    }
    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.model.x_bounds.iter().chain(&self.model.u_bounds);
        let lo = b.clone().zip(&self.scale).map(|(b, s)| b.0 / s).collect();
        let up = b.zip(&self.scale).map(|(b, s)| b.1 / s).collect();
        (lo, up)
    }
    fn initial_point(&self) -> Vec<f64> {
        self.start.iter().zip(&self.scale).map(|(v, s)| v / s).collect()
    }
    fn jac_eq_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..self.model.n_x).flat_map(|i| (0..n).map(move |j| (i, j))).collect()
    }
    fn jac_ineq_pattern(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }
    fn hess_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
    }
    fn eval_values(&self, w: &[f64], h: &mut [f64], _g: &mut [f64]) -> f64 {
        let (x, u) = self.unscale(w);
        match self.model.step(&x, &u, &self.d) {
            Ok(next) => {
                for i in 0..self.model.n_x {
                    h[i] = (next[i] - x[i]) / self.model.x_scale[i];
                }
            }
            Err(_) => h.iter_mut().for_each(|v| *v = f64::NAN),
        }
        self.model.stage_cost(&x, &u, None, &self.refs)
    }
    fn eval_derivs(
        &self,
        w: &[f64],
        obj_factor: f64,
        lam_eq: &[f64],
        _lam_ineq: &[f64],
        grad: &mut [f64],
        jac_eq: &mut [f64],
        _jac_ineq: &mut [f64],
        hess: &mut [f64],
    ) {
        let (x, u) = self.unscale(w);
        let n_x = self.model.n_x;
        let n = self.n();
        let n_c = n + self.model.n_u;
        let sd = step_derivatives(self.model, &x, &u, &self.d);
        let cd = cost_derivatives(self.model, &x, &u, None, &self.refs);
        let s = &self.scale;
        for j in 0..n {
            grad[j] = cd.grad[j] * s[j];
        }
        for i in 0..n_x {
            for j in 0..n {
                let mut v = sd.jac[i][j] * s[j];
                if i == j {
                    v -= s[j];
                }
                jac_eq[i * n + j] = v / self.model.x_scale[i];
            }
        }
        let mut k = 0;
        for a in 0..n {
            for b in a..n {
                let mut v = obj_factor * cd.hess[a * n_c + b];
                for i in 0..n_x {
                    v += lam_eq[i] / self.model.x_scale[i] * sd.hess[i][a * n + b];
                }
                hess[k] = v * s[a] * s[b];
                k += 1;
            }
        }
    }
}

/// Solves the steady-state optimization problem of realization `r`, minimizing
/// the stage cost against `anchor` subject to x = f(x, u, d^r) and the bounds.
pub fn solve_equilibrium(
    model: &SystemModel,
    r: usize,
    anchor: &CostRefs,
    guess: Option<(&[f64], &[f64])>,
) -> Result<EquilibriumPair, TerminalError> {
    model.validate()?;
    if r >= model.n_realizations() {
        return Err(TerminalError::Invalid(format!("realization {r} does not exist")));
    }
    let d = model.realizations[r].d.clone();
    let start: Vec<f64> = match guess {
        Some((x, u)) => x.iter().chain(u).copied().collect(),
        None => model.x_bounds.iter().chain(&model.u_bounds).map(|b| midpoint(*b)).collect(),
    };
    let scale: Vec<f64> = model.x_scale.iter().chain(&model.u_scale).copied().collect();
    let nlp = SteadyState { model, d: d.clone(), refs: anchor.clone(), start, scale };
    let opts = SolverOptions { tol: 1e-11, max_iter: 1000, ..SolverOptions::default() };
    let sol = solver::solve(&nlp, &opts, None::<&WarmStart>)
        .map_err(|e| TerminalError::InfeasibleEquilibrium { realization: r, reason: e.to_string() })?;
    let (x_f, u_f) = nlp.unscale(&sol.w);
    let residual = equilibrium_residual(model, &x_f, &u_f, &d)?;
    if !(residual < 1e-8) {
        return Err(TerminalError::InfeasibleEquilibrium {
            realization: r,
            reason: format!("steady-state residual {residual:e} exceeds 1e-8"),
        });
    }
    Ok(EquilibriumPair { realization: r, x_f, u_f, d, residual })
}

fn midpoint((lo, hi): (f64, f64)) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo + 1.0,
        (false, true) => hi - 1.0,
        (false, false) => 0.0,
    }
}

pub fn equilibrium_residual(model: &SystemModel, x: &[f64], u: &[f64], d: &[f64]) -> Result<f64, ModelError> {
    let next = model.step(x, u, d)?;
    Ok(next.iter().zip(x).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

/// A model written in deviation coordinates around one equilibrium pair, so
/// that dynamics and stage cost share a common zero.
#[derive(Clone, Debug)]
pub struct TransformedModel<'a> {
    pub model: &'a SystemModel,
    pub pair: EquilibriumPair,
    pub refs: CostRefs,
    /// Stage cost at the equilibrium, subtracted from every stage.
    pub l_f: f64,
}

pub fn deviation_transform<'a>(model: &'a SystemModel, pair: &EquilibriumPair) -> TransformedModel<'a> {
    let refs = stage_refs(&model.refs, &pair.x_f);
    let l_f = model.stage_cost(&pair.x_f, &pair.u_f, None, &refs);
    TransformedModel { model, pair: pair.clone(), refs, l_f }
}

impl TransformedModel<'_> {
    pub fn to_deviation_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.pair.x_f).map(|(a, b)| a - b).collect()
    }
    pub fn from_deviation_x(&self, xb: &[f64]) -> Vec<f64> {
        xb.iter().zip(&self.pair.x_f).map(|(a, b)| a + b).collect()
    }
    pub fn to_deviation_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.pair.u_f).map(|(a, b)| a - b).collect()
    }
    pub fn from_deviation_u(&self, ub: &[f64]) -> Vec<f64> {
        ub.iter().zip(&self.pair.u_f).map(|(a, b)| a + b).collect()
    }

    /// f_bar(x, u) = f(x + x_f, u + u_f, d) - x_f.
    pub fn f_bar(&self, xb: &[f64], ub: &[f64]) -> Result<Vec<f64>, ModelError> {
        let next = self.model.step(&self.from_deviation_x(xb), &self.from_deviation_u(ub), &self.pair.d)?;
        Ok(self.to_deviation_x(&next))
    }

    /// l_bar(x, u) = l(x + x_f, u + u_f) - l(x_f, u_f).
    pub fn l_bar(&self, xb: &[f64], ub: &[f64]) -> f64 {
        self.model.stage_cost(&self.from_deviation_x(xb), &self.from_deviation_u(ub), None, &self.refs) - self.l_f
    }

    /// psi_bar(x) = x' P x.
    pub fn psi_bar(&self, xb: &[f64], p: &DMatrix<f64>) -> f64 {
        quad_form(p, xb)
    }

    pub fn x_bounds(&self) -> Vec<(f64, f64)> {
        shift_bounds(&self.model.x_bounds, &self.pair.x_f)
    }

    pub fn u_bounds(&self) -> Vec<(f64, f64)> {
        shift_bounds(&self.model.u_bounds, &self.pair.u_f)
    }
}

fn shift_bounds(b: &[(f64, f64)], c: &[f64]) -> Vec<(f64, f64)> {
    b.iter().zip(c).map(|((lo, hi), v)| (lo - v, hi - v)).collect()
}

pub fn quad_form(p: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * p[(i, j)] * x[j];
        }
    }
    s
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITER: usize = 100_000;

/// Infinite-horizon LQR: the stabilizing DARE solution P and the gain K with
/// u = -K x.
pub fn solve_riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), TerminalError> {
    riccati_for(a, b, q, r, 0)
}

fn riccati_for(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    realization: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), TerminalError> {
    if a.nrows() != a.ncols() || b.nrows() != a.nrows() || q.shape() != a.shape() || r.nrows() != b.ncols() {
        return Err(TerminalError::Invalid("inconsistent LQR dimensions".into()));
    }
    let sol = linalg::solve_dare(a, b, q, r, RICCATI_TOL, RICCATI_MAX_ITER)
        .map_err(|(_, residual)| TerminalError::RiccatiNonConvergence { realization, residual })?;
    let rho = linalg::spectral_radius(&(a - b * &sol.k));
    if !(rho < 1.0) {
        return Err(TerminalError::Unstable { spectral_radius: rho });
    }
    Ok((sol.p, sol.k))
}

/// Solves A_K' P A_K + W = P for a Schur-stable A_K.
pub fn solve_lyapunov(a_k: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>, TerminalError> {
    let rho = linalg::spectral_radius(a_k);
    if !(rho < 1.0) {
        return Err(TerminalError::Unstable { spectral_radius: rho });
    }
    linalg::solve_lyapunov(a_k, w).ok_or(TerminalError::Unstable { spectral_radius: rho })
}

/// Sampled bound |phi(x)| <= M |x|^q of the closed-loop linearization error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundFit {
    pub m: f64,
    pub q: f64,
    pub n_samples: usize,
    pub n_retained: usize,
    /// Samples whose linear control left the input bounds.
    pub n_saturated: usize,
    /// Samples whose successor was not finite.
    pub n_nonfinite: usize,
    /// (|x|, |phi|) of the retained samples.
    #[serde(skip)]
    pub samples: Vec<(f64, f64)>,
}

fn realization_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng
}

/// Fits the linearization-error bound of the closed loop u = u_f - K (x - x_f)
/// from one-step simulations of `n_samples` states drawn uniformly from the
/// deviation box of the state bounds scaled by `box_scale`.
///
/// q is the least-squares slope in log-log space; M is then the smallest value
/// for which the bound holds on every retained sample.
pub fn fit_error_bound(
    model: &SystemModel,
    pair: &EquilibriumPair,
    k: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
    box_scale: f64,
) -> Result<ErrorBoundFit, TerminalError> {
    if n_samples == 0 || !(box_scale > 0.0) {
        return Err(TerminalError::Fit("need at least one sample and a positive box scale".into()));
    }
    let (a, b) = model.linearize(&pair.x_f, &pair.u_f, &pair.d)?;
    let a_k = &a - &b * k;
    let tm = deviation_transform(model, pair);
    let bx = tm.x_bounds();
    let mut rng = realization_rng(seed, pair.realization);
    let mut fit = ErrorBoundFit { n_samples, ..Default::default() };
    let (n_x, n_u) = (model.n_x, model.n_u);
    let mut xb = vec![0.0; n_x];
    for _ in 0..n_samples {
        for i in 0..n_x {
            let (lo, hi) = bx[i];
            let t: f64 = rng.random();
            xb[i] = box_scale * (lo + (hi - lo) * t);
        }
        let ub: Vec<f64> = (0..n_u).map(|i| -(0..n_x).map(|j| k[(i, j)] * xb[j]).sum::<f64>()).collect();
        if !model.u_in_bounds(&tm.from_deviation_u(&ub), 0.0) {
            fit.n_saturated += 1;
            continue;
        }
        let Ok(next) = tm.f_bar(&xb, &ub) else {
            fit.n_nonfinite += 1;
            continue;
        };
        let lin: Vec<f64> = (0..n_x).map(|i| (0..n_x).map(|j| a_k[(i, j)] * xb[j]).sum::<f64>()).collect();
        let phi: Vec<f64> = next.iter().zip(&lin).map(|(p, l)| p - l).collect();
        let (nx, np) = (norm(&xb), norm(&phi));
        if !(nx > 0.0) || !np.is_finite() {
            fit.n_nonfinite += 1;
            continue;
        }
        fit.samples.push((nx, np));
    }
    fit.n_retained = fit.samples.len();
    if fit.n_retained == 0 {
        return Err(TerminalError::Fit("every sample was discarded".into()));
    }
    let logs: Vec<(f64, f64)> = fit.samples.iter().filter(|s| s.1 > 0.0).map(|&(x, p)| (x.ln(), p.ln())).collect();
    // Errors at rounding level carry no exponent information; use q = 2.
    let roundoff = fit.samples.iter().all(|&(x, p)| p <= 1e-10 * x.max(1.0));
    fit.q = if logs.len() >= 2 && !roundoff {
        let n = logs.len() as f64;
        let mx = logs.iter().map(|s| s.0).sum::<f64>() / n;
        let my = logs.iter().map(|s| s.1).sum::<f64>() / n;
        let sxy: f64 = logs.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
        let sxx: f64 = logs.iter().map(|s| (s.0 - mx) * (s.0 - mx)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            2.0
        }
    } else {
        2.0
    };
    fit.m = fit.samples.iter().map(|&(x, p)| p / x.powf(fit.q)).fold(0.0, f64::max);
    Ok(fit)
}

/// Quantities entering the terminal radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub c_f: f64,
    /// Largest singular value of A_K.
    pub sigma_bar: f64,
    pub lambda: f64,
    pub lambda_min_w: f64,
    pub lambda_max_w: f64,
    pub eps_lq: f64,
    /// sigma_bar < 1; without it the radius carries no invariance guarantee.
    pub contractive: bool,
}

/// Relative default of eps_LQ with respect to lambda_min(W).
pub const EPS_LQ_REL: f64 = 1e-6;

/// Terminal radius
///
/// ```text
/// c_f = [(-s L + sqrt((s L)^2 + (lmin(W) - eps) L)) / (L M)]^(1/(q-1)),
/// L = lmax(W) / (1 - s)^2,  s = sigma_max(A_K),  W = Q + K'RK.
/// ```
///
/// `eps_lq = None` selects 1e-6 lmin(W). The formula is evaluated whenever it
/// is defined; `contractive` reports whether s < 1.
pub fn terminal_radius(
    m: f64,
    q: f64,
    a_k: &DMatrix<f64>,
    qm: &DMatrix<f64>,
    rm: &DMatrix<f64>,
    k: &DMatrix<f64>,
    eps_lq: Option<f64>,
) -> Result<RadiusReport, TerminalError> {
    if !(q > 1.0) {
        return Err(TerminalError::RadiusUndefined(format!("exponent q = {q} must exceed 1")));
    }
    if !(m >= 0.0) {
        return Err(TerminalError::RadiusUndefined(format!("error bound M = {m} is negative")));
    }
    let sigma_bar = linalg::sigma_max(a_k);
    if (1.0 - sigma_bar).abs() < 1e-12 {
        return Err(TerminalError::RadiusUndefined("sigma_bar = 1".into()));
    }
    let w = qm + k.transpose() * rm * k;
    let (lambda_min_w, lambda_max_w) = linalg::sym_eig_range(&w);
    let eps_lq = eps_lq.unwrap_or(EPS_LQ_REL * lambda_min_w);
    if !(lambda_min_w - eps_lq > 0.0) {
        return Err(TerminalError::RadiusUndefined(format!(
            "lambda_min(W) = {lambda_min_w:e} does not exceed eps_LQ = {eps_lq:e}"
        )));
    }
    let lambda = lambda_max_w / (1.0 - sigma_bar).powi(2);
    // M = 0 leaves the radius unbounded; f64::MAX keeps artifacts valid JSON.
    let c_f = if m == 0.0 {
        f64::MAX
    } else {
        let sl = sigma_bar * lambda;
        let base = (-sl + (sl * sl + (lambda_min_w - eps_lq) * lambda).sqrt()) / (lambda * m);
        if !(base > 0.0) || !base.is_finite() {
            return Err(TerminalError::RadiusUndefined(format!("non-positive base {base:e}")));
        }
        base.powf(1.0 / (q - 1.0))
    };
    Ok(RadiusReport { c_f, sigma_bar, lambda, lambda_min_w, lambda_max_w, eps_lq, contractive: sigma_bar < 1.0 })
}

mod row_major {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
    }
}

/// Ingredients of a single realization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RealizationIngredients {
    pub realization: usize,
    pub label: String,
    pub pair: EquilibriumPair,
    #[serde(with = "row_major")]
    pub a: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub b: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub k: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub p: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub w: DMatrix<f64>,
    pub fit: ErrorBoundFit,
    pub radius: RadiusReport,
}

/// Terminal costs psi_r(x) = (x - x_f^r)' P_r (x - x_f^r), balls
/// |x - x_f^r| <= c_f^r and local laws u = u_f^r - K_r (x - x_f^r).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub model: String,
    pub mode: GainMode,
    pub refs_setpoint: Vec<f64>,
    pub seed: u64,
    pub n_samples: usize,
    pub box_scale: f64,
    pub eps_lq_rel: f64,
    #[serde(with = "row_major")]
    pub q_weight: DMatrix<f64>,
    #[serde(with = "row_major")]
    pub r_weight: DMatrix<f64>,
    pub per: Vec<RealizationIngredients>,
    /// min_r c_f^r in common-gain mode, or an explicit override.
    pub common_radius: Option<f64>,
}

impl TerminalIngredients {
    pub fn n_realizations(&self) -> usize {
        self.per.len()
    }

    /// Radius of the terminal ball used for realization r.
    pub fn radius(&self, r: usize) -> f64 {
        self.common_radius.unwrap_or(self.per[r].radius.c_f)
    }

    pub fn x_f(&self, r: usize) -> &[f64] {
        &self.per[r].pair.x_f
    }

    pub fn u_f(&self, r: usize) -> &[f64] {
        &self.per[r].pair.u_f
    }

    pub fn terminal_cost(&self, r: usize, x: &[f64]) -> f64 {
        let dx: Vec<f64> = x.iter().zip(self.x_f(r)).map(|(a, b)| a - b).collect();
        quad_form(&self.per[r].p, &dx)
    }

    /// Local control law h_f^r(x) in physical coordinates.
    pub fn control_law(&self, r: usize, x: &[f64]) -> Vec<f64> {
        let ing = &self.per[r];
        let dx: Vec<f64> = x.iter().zip(&ing.pair.x_f).map(|(a, b)| a - b).collect();
        (0..ing.k.nrows())
            .map(|i| ing.pair.u_f[i] - (0..dx.len()).map(|j| ing.k[(i, j)] * dx[j]).sum::<f64>())
            .collect()
    }

    pub fn in_ball(&self, r: usize, x: &[f64]) -> bool {
        let dx: Vec<f64> = x.iter().zip(self.x_f(r)).map(|(a, b)| a - b).collect();
        norm(&dx) <= self.radius(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ingredients serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, TerminalError> {
        serde_json::from_str(s).map_err(|e| TerminalError::Invalid(format!("ingredient artifact: {e}")))
    }

    /// Writes the (|x|, |phi|) samples of every realization as CSV.
    pub fn write_samples_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "realization,label,norm_x,norm_phi")?;
        for ing in &self.per {
            for (x, p) in &ing.fit.samples {
                writeln!(w, "{},{},{:e},{:e}", ing.realization, ing.label, x, p)?;
            }
        }
        w.flush()
    }
}

/// Everything that determines a terminal-ingredient synthesis.
#[derive(Clone, Debug)]
pub struct TerminalConfig {
    pub mode: GainMode,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// eps_LQ relative to lambda_min(W_r).
    pub eps_lq_rel: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub box_scale: f64,
    /// Cost references of the steady-state problem.
    pub anchor: CostRefs,
    pub equilibrium_guess: Option<(Vec<f64>, Vec<f64>)>,
    /// Use this gain for every realization (P_r by Lyapunov).
    pub gain_override: Option<DMatrix<f64>>,
    /// Use these (M, q) instead of sampling.
    pub fit_override: Option<(f64, f64)>,
    /// Use this radius for every realization.
    pub radius_override: Option<f64>,
    /// Use these radii, one per realization.
    pub radii_override: Option<Vec<f64>>,
}

impl TerminalConfig {
    pub fn new(model: &SystemModel, mode: GainMode, q: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        Self {
            mode,
            q,
            r,
            eps_lq_rel: EPS_LQ_REL,
            n_samples: 10_000,
            seed: 1,
            box_scale: 1.0,
            anchor: model.refs.clone(),
            equilibrium_guess: None,
            gain_override: None,
            fit_override: None,
            radius_override: None,
            radii_override: None,
        }
    }

    /// Tunings of the builtin examples; `None` for unknown names.
    pub fn example(model: &SystemModel) -> Option<Self> {
        use crate::model::builtin::{CSTR_OPERATING_INPUT, CSTR_OPERATING_STATE};
        let diag = |v: &[f64]| DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v));
        let mut c = match model.name.as_str() {
            "spring_mass" => {
                let mut c = Self::new(model, GainMode::CommonGain, diag(&[30.0, 20.0]), diag(&[1.0]));
                c.box_scale = 0.25;
                c
            }
            "cstr" => {
                let mut c = Self::new(model, GainMode::IndependentGains, diag(&[1.0; 4]), diag(&[1e-3, 1e-4]));
                c.equilibrium_guess = Some((CSTR_OPERATING_STATE.to_vec(), CSTR_OPERATING_INPUT.to_vec()));
                c.box_scale = 0.01;
                c
            }
            "quad_tank" => {
                let mut c = Self::new(model, GainMode::IndependentGains, diag(&[1.5; 4]), diag(&[1.0; 2]));
                c.equilibrium_guess = Some((vec![14.0, 14.0, 15.0, 15.0], vec![40.0, 35.0]));
                c
            }
            "double_integrator" => Self::new(model, GainMode::CommonGain, diag(&[1.0, 1.0]), diag(&[0.1])),
            _ => return None,
        };
        c.n_samples = 10_000;
        Some(c)
    }
}

/// Spring-damper-mass ingredients with the reported common gain
/// K = [1.7409, 2.0959], error bound (M, q) = (0.3235, 2.2176) and common
/// radius 0.6690, used where the self-computed radii are degenerate.
pub fn spring_mass_reported_config(model: &SystemModel) -> TerminalConfig {
    let mut c = TerminalConfig::example(model).unwrap_or_else(|| {
        TerminalConfig::new(model, GainMode::CommonGain, DMatrix::identity(2, 2), DMatrix::identity(1, 1))
    });
    c.mode = GainMode::CommonGain;
    c.gain_override = Some(DMatrix::from_row_slice(1, 2, &SPRING_MASS_REPORTED_GAIN));
    c.fit_override = Some(SPRING_MASS_REPORTED_FIT);
    c.radius_override = Some(SPRING_MASS_REPORTED_RADII[2]);
    c
}

/// Quad-tank ingredients with the reported radii. The self-computed radii are
/// about 20 times smaller and keep every horizon at N_max.
pub fn quad_tank_reported_config(model: &SystemModel) -> TerminalConfig {
    let mut c = TerminalConfig::example(model).unwrap_or_else(|| {
        TerminalConfig::new(model, GainMode::IndependentGains, DMatrix::identity(4, 4), DMatrix::identity(2, 2))
    });
    c.radii_override = Some(QUAD_TANK_REPORTED_RADII.to_vec());
    c
}

/// Reported quad-tank radii in realization order: gamma_1 outer, gamma_2
/// inner, each over {0.35, 0.40, 0.45}.
pub const QUAD_TANK_REPORTED_RADII: [f64; 9] = [30.97, 31.57, 12.12, 26.63, 31.77, 19.99, 23.69, 27.04, 30.43];

pub const SPRING_MASS_REPORTED_GAIN: [f64; 2] = [1.7409, 2.0959];
pub const SPRING_MASS_REPORTED_FIT: (f64, f64) = (0.3235, 2.2176);
pub const SPRING_MASS_REPORTED_RADII: [f64; 3] = [0.8032, 0.8922, 0.6690];

/// The ingredient pipeline with default sampling box and anchor.
pub fn build_terminal_ingredients(
    model: &SystemModel,
    mode: GainMode,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    eps_lq_rel: f64,
    n_samples: usize,
    seed: u64,
) -> Result<TerminalIngredients, TerminalError> {
    let mut cfg =
        TerminalConfig::example(model).unwrap_or_else(|| TerminalConfig::new(model, mode, q.clone(), r.clone()));
    cfg.mode = mode;
    cfg.q = q.clone();
    cfg.r = r.clone();
    cfg.eps_lq_rel = eps_lq_rel;
    cfg.n_samples = n_samples;
    cfg.seed = seed;
    build_terminal_ingredients_with(model, &cfg)
}

/// Runs equilibrium, LQR, error-bound and radius steps for every realization.
pub fn build_terminal_ingredients_with(
    model: &SystemModel,
    cfg: &TerminalConfig,
) -> Result<TerminalIngredients, TerminalError> {
    model.validate()?;
    let (n_x, n_u) = (model.n_x, model.n_u);
    if cfg.q.shape() != (n_x, n_x) || cfg.r.shape() != (n_u, n_u) {
        return Err(TerminalError::Invalid("weight matrices do not match the model".into()));
    }
    let guess = cfg.equilibrium_guess.as_ref().map(|(x, u)| (x.as_slice(), u.as_slice()));
    let n_r = model.n_realizations();
    if let Some(radii) = &cfg.radii_override {
        if radii.len() != n_r || radii.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(TerminalError::Invalid(format!("need {n_r} positive radii in the radius override")));
        }
    }
    let mut pairs = Vec::with_capacity(n_r);
    let mut lins = Vec::with_capacity(n_r);
    for r in 0..n_r {
        let pair = solve_equilibrium(model, r, &cfg.anchor, guess)?;
        lins.push(model.linearize(&pair.x_f, &pair.u_f, &pair.d)?);
        pairs.push(pair);
    }
    let common_k = match (&cfg.gain_override, cfg.mode) {
        (Some(k), _) => {
            if k.shape() != (n_u, n_x) {
                return Err(TerminalError::Invalid("gain override has the wrong shape".into()));
            }
            Some(k.clone())
        }
        (None, GainMode::CommonGain) => {
            let nom = model.nominal_index;
            let (a, b) = &lins[nom];
            Some(riccati_for(a, b, &cfg.q, &cfg.r, nom)?.1)
        }
        (None, GainMode::IndependentGains) => None,
    };
    let mut per = Vec::with_capacity(n_r);
    for (r, (pair, (a, b))) in pairs.into_iter().zip(lins).enumerate() {
        let (k, p) = match &common_k {
            Some(k) => {
                let a_k = &a - &b * k;
                let w = &cfg.q + k.transpose() * &cfg.r * k;
                (k.clone(), solve_lyapunov(&a_k, &w)?)
            }
            None => {
                let (p, k) = riccati_for(&a, &b, &cfg.q, &cfg.r, r)?;
                (k, p)
            }
        };
        let fit = match cfg.fit_override {
            Some((m, q)) => ErrorBoundFit { m, q, ..Default::default() },
            None => fit_error_bound(model, &pair, &k, cfg.n_samples, cfg.seed, cfg.box_scale)?,
        };
        let a_k = &a - &b * &k;
        let w = &cfg.q + k.transpose() * &cfg.r * &k;
        let (lmin, _) = linalg::sym_eig_range(&w);
        let mut radius = terminal_radius(fit.m, fit.q, &a_k, &cfg.q, &cfg.r, &k, Some(cfg.eps_lq_rel * lmin))?;
        if let Some(c) = cfg.radius_override {
            radius.c_f = c;
        }
        if let Some(radii) = &cfg.radii_override {
            radius.c_f = radii[r];
        }
        per.push(RealizationIngredients {
            realization: r,
            label: model.realizations[r].label.clone(),
            pair,
            a,
            b,
            k,
            p,
            w,
            fit,
            radius,
        });
    }
    let common_radius = match (cfg.radius_override, cfg.mode) {
        (Some(c), _) => Some(c),
        (None, GainMode::CommonGain) => Some(per.iter().map(|p| p.radius.c_f).fold(f64::INFINITY, f64::min)),
        (None, GainMode::IndependentGains) => None,
    };
    Ok(TerminalIngredients {
        model: model.name.clone(),
        mode: cfg.mode,
        refs_setpoint: cfg.anchor.setpoint.clone(),
        seed: cfg.seed,
        n_samples: cfg.n_samples,
        box_scale: cfg.box_scale,
        eps_lq_rel: cfg.eps_lq_rel,
        q_weight: cfg.q.clone(),
        r_weight: cfg.r.clone(),
        per,
        common_radius,
    })
}

/// Sampled invariance and descent statistics of one realization's terminal set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionCheck {
    pub realization: usize,
    pub n_samples: usize,
    /// Samples outside the state bounds, not tested further.
    pub n_outside_bounds: usize,
    /// Local control outside the input bounds.
    pub input_violations: usize,
    /// Successor outside the ball.
    pub ball_violations: usize,
    /// Successor outside the state bounds.
    pub state_violations: usize,
    /// psi(x+) - psi(x) > -l(x, u) + 1e-8.
    pub descent_violations: usize,
    /// max |x+ - x_f| / c_f over the tested samples.
    pub max_ball_ratio: f64,
    /// max of psi(x+) - psi(x) + l(x, u).
    pub max_descent_gap: f64,
}

impl RegionCheck {
    pub fn violations(&self) -> usize {
        self.input_violations + self.ball_violations + self.state_violations + self.descent_violations
    }
}

/// Draws `n_samples` states uniformly from each terminal ball and checks that
/// the local law keeps the successor in the ball and in the bounds, and that
/// psi decreases by at least the stage cost. With a common gain and a common
/// radius the successor is tested under every realization of the plant.
pub fn check_terminal_region(
    model: &SystemModel,
    ing: &TerminalIngredients,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<RegionCheck>, TerminalError> {
    let n_x = model.n_x;
    let common = ing.mode == GainMode::CommonGain || ing.common_radius.is_some();
    let mut out = Vec::with_capacity(ing.n_realizations());
    for r in 0..ing.n_realizations() {
        let tm = deviation_transform(model, &ing.per[r].pair);
        let c_f = ing.radius(r);
        let mut chk = RegionCheck { realization: r, n_samples, ..Default::default() };
        let mut rng = realization_rng(seed ^ 0x5eed, r);
        let plants: Vec<usize> = if common { (0..ing.n_realizations()).collect() } else { vec![r] };
        let mut xb = vec![0.0; n_x];
        for _ in 0..n_samples {
            let mut nrm = 0.0f64;
            for v in xb.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
                nrm += *v * *v;
            }
            let rad = c_f * rng.random::<f64>().powf(1.0 / n_x as f64) / nrm.sqrt();
            xb.iter_mut().for_each(|v| *v *= rad);
            let x = tm.from_deviation_x(&xb);
            if !model.x_in_bounds(&x, 0.0) {
                chk.n_outside_bounds += 1;
                continue;
            }
            let u = ing.control_law(r, &x);
            if !model.u_in_bounds(&u, 1e-9) {
                chk.input_violations += 1;
            }
            let ub = tm.to_deviation_u(&u);
            let l = tm.l_bar(&xb, &ub);
            let psi = quad_form(&ing.per[r].p, &xb);
            for &s in &plants {
                let next = match model.step(&x, &u, &model.realizations[s].d) {
                    Ok(v) => v,
                    Err(_) => {
                        chk.state_violations += 1;
                        continue;
                    }
                };
                let nb = tm.to_deviation_x(&next);
                let ratio = norm(&nb) / c_f;
                chk.max_ball_ratio = chk.max_ball_ratio.max(ratio);
                if ratio > 1.0 {
                    chk.ball_violations += 1;
                }
                if !model.x_in_bounds(&next, 1e-9) {
                    chk.state_violations += 1;
                }
                if s == r {
                    let gap = quad_form(&ing.per[r].p, &nb) - psi + l;
                    chk.max_descent_gap = if chk.max_descent_gap == 0.0 { gap } else { chk.max_descent_gap.max(gap) };
                    if gap > 1e-8 {
                        chk.descent_violations += 1;
                    }
                }
            }
        }
        out.push(chk);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;
    use nalgebra::dmatrix;

    #[test]
    fn spring_mass_equilibrium_is_origin() {
        let m = builtin::spring_damper_mass();
        for r in 0..3 {
            let p = solve_equilibrium(&m, r, &m.refs, None).unwrap();
            assert!(p.x_f.iter().chain(&p.u_f).all(|v| v.abs() < 1e-7), "{p:?}");
            assert!(p.residual < 1e-8);
        }
    }

    #[test]
    fn cstr_equilibrium_hits_setpoint() {
        let m = builtin::cstr();
        let g = (builtin::CSTR_OPERATING_STATE.as_slice(), builtin::CSTR_OPERATING_INPUT.as_slice());
        let p = solve_equilibrium(&m, m.nominal_index, &m.refs, Some(g)).unwrap();
        assert!((p.x_f[1] - 0.5).abs() < 1e-3, "{p:?}");
        assert!(p.residual < 1e-8);
        assert!(m.x_in_bounds(&p.x_f, 1e-9) && m.u_in_bounds(&p.u_f, 1e-9));
    }

    #[test]
    fn quad_tank_nominal_equilibrium_hits_setpoint() {
        let m = builtin::quad_tank();
        let p = solve_equilibrium(&m, m.nominal_index, &m.refs, None).unwrap();
        assert!((p.x_f[0] - 14.0).abs() < 1e-4 && (p.x_f[1] - 14.0).abs() < 1e-4, "{p:?}");
        assert!(m.x_in_bounds(&p.x_f, 1e-9));
    }

    #[test]
    fn deviation_transform_has_common_zero() {
        let m = builtin::cstr();
        let g = (builtin::CSTR_OPERATING_STATE.as_slice(), builtin::CSTR_OPERATING_INPUT.as_slice());
        for r in 0..3 {
            let p = solve_equilibrium(&m, r, &m.refs, Some(g)).unwrap();
            let t = deviation_transform(&m, &p);
            let z = t.f_bar(&[0.0; 4], &[0.0; 2]).unwrap();
            assert!(z.iter().all(|v| v.abs() < 1e-8));
            assert!(t.l_bar(&[0.0; 4], &[0.0; 2]).abs() < 1e-15);
            assert_eq!(t.psi_bar(&[0.0; 4], &DMatrix::identity(4, 4)), 0.0);
            let x = [0.3, 1.7, 120.5, 99.25];
            let back = t.from_deviation_x(&t.to_deviation_x(&x));
            assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-14 * b.abs().max(1.0)));
        }
    }

    #[test]
    fn riccati_degenerate_case() {
        let i = DMatrix::<f64>::identity(2, 2);
        let (p, k) = solve_riccati(&DMatrix::zeros(2, 2), &i, &i, &i).unwrap();
        assert!(linalg::max_abs(&(p - &i)) < 1e-12);
        assert!(linalg::max_abs(&k) < 1e-12);
    }

    #[test]
    fn riccati_scalar_matches_value_iteration() {
        // Oracle: iterate p <- q + a^2 p - (a b p)^2 / (r + b^2 p) to a fixed point.
        let mut p = 1.0f64;
        for _ in 0..10_000 {
            p = 1.0 + p - p * p / (1.0 + p);
        }
        let one = dmatrix![1.0];
        let (ps, k) = solve_riccati(&one, &one, &one, &one).unwrap();
        assert!((ps[(0, 0)] - p).abs() < 1e-9);
        assert!((ps[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-9);
        assert!((k[(0, 0)] - p / (1.0 + p)).abs() < 1e-9);
    }

    #[test]
    fn lyapunov_closed_forms() {
        let w = dmatrix![2.0, 0.5; 0.5, 1.0];
        let p = solve_lyapunov(&DMatrix::zeros(2, 2), &w).unwrap();
        assert!(linalg::max_abs(&(p - &w)) < 1e-15);
        let p = solve_lyapunov(&dmatrix![0.5], &dmatrix![1.0]).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        assert!(matches!(solve_lyapunov(&dmatrix![1.5], &dmatrix![1.0]), Err(TerminalError::Unstable { .. })));
    }

    #[test]
    fn lyapunov_random_stable_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
            let a = &a * (0.9 / linalg::spectral_radius(&a).max(1e-3));
            let w = DMatrix::from_fn(4, 4, |_, _| rng.random::<f64>());
            let w = &w * w.transpose() + DMatrix::identity(4, 4);
            let p = solve_lyapunov(&a, &w).unwrap();
            assert!(linalg::lyapunov_residual(&a, &w, &p) < 1e-9);
        }
    }

    #[test]
    fn linear_model_has_no_linearization_error() {
        let m = builtin::double_integrator();
        let pair = solve_equilibrium(&m, 0, &m.refs, None).unwrap();
        let k = dmatrix![0.5, 0.8];
        let fit = fit_error_bound(&m, &pair, &k, 2000, 3, 0.01).unwrap();
        assert!(fit.m < 1e-10, "{}", fit.m);
    }

    #[test]
    fn radius_scales_inversely_with_m_for_q_two() {
        let a_k = dmatrix![0.5, 0.1; 0.0, 0.4];
        let q = DMatrix::identity(2, 2);
        let r = dmatrix![1.0];
        let k = dmatrix![0.2, 0.3];
        let c1 = terminal_radius(0.5, 2.0, &a_k, &q, &r, &k, None).unwrap().c_f;
        let c2 = terminal_radius(1.0, 2.0, &a_k, &q, &r, &k, None).unwrap().c_f;
        assert!((c1 / c2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn radius_monotone_in_m_and_sigma() {
        let q = DMatrix::identity(2, 2);
        let r = dmatrix![1.0];
        let k = dmatrix![0.2, 0.3];
        for qe in [1.5, 2.0, 2.5] {
            let mut prev_s = f64::INFINITY;
            for s in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let a_k = dmatrix![s, 0.0; 0.0, 0.05];
                let mut prev_m = f64::INFINITY;
                for m in [0.1, 0.2, 0.5, 1.0, 3.0] {
                    let c = terminal_radius(m, qe, &a_k, &q, &r, &k, None).unwrap().c_f;
                    assert!(c <= prev_m);
                    prev_m = c;
                }
                let c = terminal_radius(0.5, qe, &a_k, &q, &r, &k, None).unwrap().c_f;
                assert!(c <= prev_s);
                prev_s = c;
            }
        }
    }

    #[test]
    fn radius_rejects_undefined_cases() {
        let q = DMatrix::identity(1, 1);
        let r = dmatrix![1.0];
        let k = dmatrix![0.0];
        assert!(terminal_radius(1.0, 1.0, &dmatrix![0.5], &q, &r, &k, None).is_err());
        assert!(terminal_radius(1.0, 2.0, &dmatrix![1.0], &q, &r, &k, None).is_err());
        let rep = terminal_radius(1.0, 2.0, &dmatrix![1.2], &q, &r, &k, None).unwrap();
        assert!(!rep.contractive);
    }

    #[test]
    fn single_realization_modes_coincide() {
        let mut m = builtin::double_integrator();
        m.realizations.truncate(1);
        m.realizations[0].prob = 1.0;
        let q = DMatrix::identity(2, 2);
        let r = dmatrix![0.1];
        let a = build_terminal_ingredients(&m, GainMode::CommonGain, &q, &r, EPS_LQ_REL, 1000, 1).unwrap();
        let b = build_terminal_ingredients(&m, GainMode::IndependentGains, &q, &r, EPS_LQ_REL, 1000, 1).unwrap();
        assert!(linalg::max_abs(&(&a.per[0].k - &b.per[0].k)) < 1e-9);
        assert!(linalg::max_abs(&(&a.per[0].p - &b.per[0].p)) < 1e-6 * linalg::max_abs(&b.per[0].p));
        assert_eq!(a.radius(0), b.radius(0));
    }

    #[test]
    fn json_round_trip() {
        let m = builtin::double_integrator();
        let cfg = TerminalConfig::example(&m).unwrap();
        let ing = build_terminal_ingredients_with(&m, &TerminalConfig { n_samples: 1000, ..cfg }).unwrap();
        let back = TerminalIngredients::from_json(&ing.to_json()).unwrap();
        assert_eq!(back.per.len(), 2);
        assert_eq!(back.per[1].p, ing.per[1].p);
        assert_eq!(back.per[1].k, ing.per[1].k);
        assert_eq!(back.common_radius, ing.common_radius);
    }
}

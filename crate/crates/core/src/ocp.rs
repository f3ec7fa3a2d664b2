//! Multi-stage optimal control problem over a scenario tree, flattened into a
//! parametric NLP with parameter p = x_k.
//!
//! Each scenario c owns states z_0..z_N and inputs nu_0..nu_{N-1}, stored as
//! [z_0, nu_0, z_1, nu_1, ..., z_N] and scaled by the model's typical
//! magnitudes. Equalities are the initial conditions z_0^c = x_k, the dynamics
//! z_{i+1}^c = f(z_i^c, nu_i^c, d_i^c) and the non-anticipativity pairs.
//! Inequalities are the terminal balls |z_N^c - x_f^r|^2 <= c_f^2 with
//! r = r(c), plus soft state bounds when slacks are enabled. The objective is
//!
//! ```text
//! sum_c w_c ( sum_i [l(z_i, nu_i, nu_i - nu_{i-1}) - l(x_f^r, u_f^r)] + psi_r(z_N) )
//! ```
//!
//! with nu_{-1} = u_prev, evaluated against the cost references of r(c).

use std::sync::Arc;

use serde::Serialize;

use crate::error::OcpError;
use crate::model::{cost_derivatives, stage_cost_with_prev, step_derivatives, CostRefs, SystemModel};
use crate::scenario::{nac_pairs, NacPair, ScenarioTree};
use crate::solver::sensitivity::{ParamJacobian, ParametricNlp};
use crate::solver::{kkt_norms, KktNorms, Nlp, PrimalDualSolution, WarmStart};
use crate::terminal::{stage_refs, TerminalIngredients};

/// Options of the problem assembly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OcpOptions {
    /// l1 weight of soft state bounds; `None` keeps the bounds hard.
    pub slack_weight: Option<f64>,
}

/// Default weight of the soft state-bound penalty.
pub const DEFAULT_SLACK_WEIGHT: f64 = 1e4;

/// The flattened multi-stage OCP.
#[derive(Clone, Debug)]
pub struct OcpProblem {
    pub model: SystemModel,
    pub tree: Arc<ScenarioTree>,
    pub ingredients: Arc<TerminalIngredients>,
    pub x_k: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub options: OcpOptions,
    nac: Vec<NacPair>,
    refs: Vec<CostRefs>,
    l_f: Vec<f64>,
    block: usize,
    n_primary: usize,
    n_slack: usize,
    row_dyn: usize,
    row_nac: usize,
    m_eq: usize,
    m_ineq: usize,
    scale: Vec<f64>,
}

/// Sizes of an assembled problem.
#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct OcpSummary {
    pub n_scenarios: usize,
    pub horizon: usize,
    pub robust_horizon: usize,
    pub n_variables: usize,
    pub n_primary: usize,
    pub n_slack: usize,
    pub n_eq: usize,
    pub n_dynamics: usize,
    pub n_initial: usize,
    pub n_nac: usize,
    pub n_ineq: usize,
    pub jac_eq_nnz: usize,
    pub jac_ineq_nnz: usize,
    pub hess_nnz: usize,
}

/// Assembles the OCP for the tree's horizon at initial state `x_k`.
pub fn assemble(
    model: &SystemModel,
    tree: Arc<ScenarioTree>,
    ingredients: Arc<TerminalIngredients>,
    x_k: &[f64],
    u_prev: &[f64],
    options: OcpOptions,
) -> Result<OcpProblem, OcpError> {
    let (n_x, n_u) = (model.n_x, model.n_u);
    if tree.n_r < 1 || tree.n < tree.n_r {
        return Err(OcpError::Horizon { n_k: tree.n, n_r: tree.n_r });
    }
    if x_k.len() != n_x || u_prev.len() != n_u {
        return Err(OcpError::Dimension(format!(
            "x_k has length {}, u_prev {}; model has n_x = {n_x}, n_u = {n_u}",
            x_k.len(),
            u_prev.len()
        )));
    }
    if tree.n_d != model.n_realizations() {
        return Err(OcpError::Dimension(format!(
            "tree branches into {} realizations, model has {}",
            tree.n_d,
            model.n_realizations()
        )));
    }
    let needed = tree.sequences.iter().flatten().copied().max().unwrap_or(0);
    if needed >= ingredients.n_realizations() {
        return Err(OcpError::MissingIngredient(ingredients.n_realizations()));
    }
    for ing in &ingredients.per {
        if ing.pair.x_f.len() != n_x || ing.pair.u_f.len() != n_u || ing.p.shape() != (n_x, n_x) {
            return Err(OcpError::Dimension(format!(
                "ingredients of realization {} do not match the model",
                ing.realization
            )));
        }
    }
    let base_refs =
        CostRefs { setpoint: ingredients.refs_setpoint.clone(), x_reg: model.refs.x_reg.clone(), reg_weight: None };
    let refs: Vec<CostRefs> = ingredients.per.iter().map(|i| stage_refs(&base_refs, &i.pair.x_f)).collect();
    let l_f: Vec<f64> =
        ingredients.per.iter().zip(&refs).map(|(i, r)| model.stage_cost(&i.pair.x_f, &i.pair.u_f, None, r)).collect();
    let n = tree.n;
    let n_c = tree.n_scenarios();
    let block = (n + 1) * n_x + n * n_u;
    let n_primary = n_c * block;
    let n_slack = if options.slack_weight.is_some() { n_c * n * n_x } else { 0 };
    let nac = nac_pairs(&tree);
    let row_dyn = n_c * n_x;
    let row_nac = row_dyn + n_c * n * n_x;
    let m_eq = row_nac + nac.len() * n_u;
    let m_ineq = n_c + 2 * n_slack;
    let mut scale = Vec::with_capacity(n_primary + n_slack);
    for _ in 0..n_c {
        for _ in 0..n {
            scale.extend_from_slice(&model.x_scale);
            scale.extend_from_slice(&model.u_scale);
        }
        scale.extend_from_slice(&model.x_scale);
    }
    for _ in 0..n_c * n {
        scale.extend_from_slice(&model.x_scale);
    }
    Ok(OcpProblem {
        model: model.clone(),
        tree,
        ingredients,
        x_k: x_k.to_vec(),
        u_prev: u_prev.to_vec(),
        options,
        nac,
        refs,
        l_f,
        block,
        n_primary,
        n_slack,
        row_dyn,
        row_nac,
        m_eq,
        m_ineq,
        scale,
    })
}

impl OcpProblem {
    pub fn horizon(&self) -> usize {
        self.tree.n
    }

    pub fn n_scenarios(&self) -> usize {
        self.tree.n_scenarios()
    }

    /// Index of the first component of z_i^c.
    pub fn z_index(&self, c: usize, i: usize) -> usize {
        c * self.block + i * (self.model.n_x + self.model.n_u)
    }

    /// Index of the first component of nu_i^c.
    pub fn nu_index(&self, c: usize, i: usize) -> usize {
        self.z_index(c, i) + self.model.n_x
    }

    fn slack_index(&self, c: usize, i: usize) -> usize {
        // i in 1..=N
        self.n_primary + (c * self.tree.n + i - 1) * self.model.n_x
    }

    /// Physical state z_i^c of a (scaled) solution vector.
    pub fn state(&self, w: &[f64], c: usize, i: usize) -> Vec<f64> {
        let k = self.z_index(c, i);
        (0..self.model.n_x).map(|j| w[k + j] * self.model.x_scale[j]).collect()
    }

    /// Physical input nu_i^c of a (scaled) solution vector.
    pub fn input(&self, w: &[f64], c: usize, i: usize) -> Vec<f64> {
        let k = self.nu_index(c, i);
        (0..self.model.n_u).map(|j| w[k + j] * self.model.u_scale[j]).collect()
    }

    /// The input applied to the plant, nu_0 (identical across scenarios).
    pub fn first_input(&self, w: &[f64]) -> Vec<f64> {
        self.input(w, 0, 0)
    }

    /// Scaled variable vector from physical per-scenario trajectories.
    pub fn pack(&self, states: &[Vec<Vec<f64>>], inputs: &[Vec<Vec<f64>>]) -> Vec<f64> {
        let mut w = vec![0.0; self.n()];
        for c in 0..self.n_scenarios() {
            for i in 0..=self.tree.n {
                let k = self.z_index(c, i);
                for j in 0..self.model.n_x {
                    w[k + j] = states[c][i][j] / self.model.x_scale[j];
                }
                if i < self.tree.n {
                    let k = self.nu_index(c, i);
                    for j in 0..self.model.n_u {
                        w[k + j] = inputs[c][i][j] / self.model.u_scale[j];
                    }
                }
            }
        }
        w
    }

    /// Same problem with a different initial state.
    pub fn with_initial_state(&self, x_k: &[f64]) -> OcpProblem {
        let mut p = self.clone();
        p.x_k = x_k.to_vec();
        p
    }

    /// Realization at stage i of scenario c.
    fn stage_realization(&self, c: usize, i: usize) -> usize {
        self.tree.sequences[c][i]
    }

    fn u_prev_of(&self, w: &[f64], c: usize, i: usize) -> Vec<f64> {
        if i == 0 {
            self.u_prev.clone()
        } else {
            self.input(w, c, i - 1)
        }
    }

    /// Objective value in physical units.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let mut h = vec![0.0; self.m_eq];
        let mut g = vec![0.0; self.m_ineq];
        self.eval_values(w, &mut h, &mut g)
    }

    /// Cost of the scenario c trajectory without the weight.
    pub fn scenario_cost(&self, w: &[f64], c: usize) -> f64 {
        let r = self.tree.leaf_realization(c);
        let mut v = 0.0;
        for i in 0..self.tree.n {
            let z = self.state(w, c, i);
            let nu = self.input(w, c, i);
            v += stage_cost_with_prev(&self.model, &z, &nu, &self.u_prev_of(w, c, i), &self.refs[r]) - self.l_f[r];
        }
        v + self.ingredients.terminal_cost(r, &self.state(w, c, self.tree.n))
    }

    /// Equilibrium-interpolated starting point: each scenario moves linearly
    /// from x_k to its terminal equilibrium with the equilibrium input.
    pub fn default_initial_point(&self) -> Vec<f64> {
        let n = self.tree.n;
        let mut states = Vec::with_capacity(self.n_scenarios());
        let mut inputs = Vec::with_capacity(self.n_scenarios());
        for c in 0..self.n_scenarios() {
            let r = self.tree.leaf_realization(c);
            let (x_f, u_f) = (self.ingredients.x_f(r), self.ingredients.u_f(r));
            let zs: Vec<Vec<f64>> = (0..=n)
                .map(|i| {
                    let t = i as f64 / n as f64;
                    self.x_k.iter().zip(x_f).map(|(a, b)| (1.0 - t) * a + t * b).collect()
                })
                .collect();
            states.push(zs);
            inputs.push(vec![u_f.to_vec(); n]);
        }
        let mut w = self.pack(&states, &inputs);
        // NAC-consistent inputs: every group shares the input of its first member.
        for p in &self.nac {
            let (a, b) = (self.nu_index(p.a, p.stage), self.nu_index(p.b, p.stage));
            for j in 0..self.model.n_u {
                w[b + j] = w[a + j];
            }
        }
        w
    }

    /// Warm start from the previous solution shifted by one stage. Scenario c of
    /// this problem continues the previous scenario that started with the
    /// applied realization `d_applied` and then follows c's realizations; the
    /// tail beyond the previous horizon is extended with the local control law.
    pub fn shifted_warm_start(&self, prev: &OcpProblem, sol: &PrimalDualSolution, d_applied: usize) -> WarmStart {
        let (n_x, n_u) = (self.model.n_x, self.model.n_u);
        let n = self.tree.n;
        let n_old = prev.tree.n;
        let mut w = vec![0.0; self.n()];
        let mut zl = vec![0.0; self.n()];
        let mut zu = vec![0.0; self.n()];
        let mut lam = vec![0.0; self.m_eq];
        let mut mu = vec![0.0; self.m_ineq];
        let copy = |dst: &mut [f64], src: &[f64], di: usize, si: usize, len: usize| {
            dst[di..di + len].copy_from_slice(&src[si..si + len]);
        };
        let scaled = |dst: &mut [f64], src: &[f64], di: usize, si: usize, len: usize, f: f64| {
            for k in 0..len {
                dst[di + k] = src[si + k] * f;
            }
        };
        for c in 0..self.n_scenarios() {
            let mut prefix = Vec::with_capacity(prev.tree.n_r);
            prefix.push(d_applied.min(prev.tree.n_d - 1));
            for j in 1..prev.tree.n_r {
                prefix.push(self.tree.sequences[c][(j - 1).min(n - 1)]);
            }
            let c_old = prev.tree.index_of(&prefix);
            let r = self.tree.leaf_realization(c);
            // Multipliers scale with the scenario weight.
            let ratio = self.tree.weights[c] / prev.tree.weights[c_old];
            if n + 1 == n_old {
                mu[c] = sol.mu[c_old] * ratio;
            }
            for i in 0..=n {
                let zi = self.z_index(c, i);
                if i < n_old {
                    let zo = prev.z_index(c_old, i + 1);
                    copy(&mut w, &sol.w, zi, zo, n_x);
                    scaled(&mut zl, &sol.z_lower, zi, zo, n_x, ratio);
                    scaled(&mut zu, &sol.z_upper, zi, zo, n_x, ratio);
                } else {
                    let z = self.state(&w, c, i - 1);
                    let u = self.input(&w, c, i - 1);
                    let d = &self.model.realizations[self.stage_realization(c, i - 1)].d;
                    let next = self
                        .model
                        .step(&z, &u, d)
                        .ok()
                        .filter(|x| self.model.x_in_bounds(x, 0.0))
                        .unwrap_or_else(|| self.ingredients.x_f(r).to_vec());
                    for j in 0..n_x {
                        w[zi + j] = next[j] / self.model.x_scale[j];
                    }
                }
                if i == n {
                    break;
                }
                let ni = self.nu_index(c, i);
                if i + 1 < n_old {
                    let no = prev.nu_index(c_old, i + 1);
                    copy(&mut w, &sol.w, ni, no, n_u);
                    scaled(&mut zl, &sol.z_lower, ni, no, n_u, ratio);
                    scaled(&mut zu, &sol.z_upper, ni, no, n_u, ratio);
                    let ro = prev.row_dyn + (c_old * n_old + i + 1) * n_x;
                    scaled(&mut lam, &sol.lam_eq, self.row_dyn + (c * n + i) * n_x, ro, n_x, ratio);
                } else {
                    let u = self.clamp_u(self.ingredients.control_law(r, &self.state(&w, c, i)));
                    for j in 0..n_u {
                        w[ni + j] = u[j] / self.model.u_scale[j];
                    }
                }
            }
        }
        for p in &self.nac {
            let (a, b) = (self.nu_index(p.a, p.stage), self.nu_index(p.b, p.stage));
            for j in 0..n_u {
                w[b + j] = w[a + j];
            }
        }
        for c in 0..self.n_scenarios() {
            let k = self.z_index(c, 0);
            for j in 0..n_x {
                w[k + j] = self.x_k[j] / self.model.x_scale[j];
            }
        }
        for k in self.n_primary..self.n() {
            w[k] = 1e-6;
        }
        let lam_ineq = (n + 1 == n_old).then_some(mu);
        WarmStart { w, lam_eq: Some(lam), lam_ineq, z_lower: Some(zl), z_upper: Some(zu) }
    }

    fn clamp_u(&self, mut u: Vec<f64>) -> Vec<f64> {
        for (v, (lo, hi)) in u.iter_mut().zip(&self.model.u_bounds) {
            *v = v.clamp(*lo, *hi);
        }
        u
    }

    pub fn summary(&self) -> OcpSummary {
        OcpSummary {
            n_scenarios: self.n_scenarios(),
            horizon: self.tree.n,
            robust_horizon: self.tree.n_r,
            n_variables: self.n(),
            n_primary: self.n_primary,
            n_slack: self.n_slack,
            n_eq: self.m_eq,
            n_dynamics: self.row_nac - self.row_dyn,
            n_initial: self.row_dyn,
            n_nac: self.m_eq - self.row_nac,
            n_ineq: self.m_ineq,
            jac_eq_nnz: self.jac_eq_pattern().len(),
            jac_ineq_nnz: self.jac_ineq_pattern().len(),
            hess_nnz: self.hess_pattern().len(),
        }
    }

    fn stage_block_vars(&self, c: usize, i: usize, out: &mut Vec<usize>) {
        out.clear();
        let (n_x, n_u) = (self.model.n_x, self.model.n_u);
        let z = self.z_index(c, i);
        out.extend(z..z + n_x + n_u);
        if self.model.uses_du && i > 0 {
            let p = self.nu_index(c, i - 1);
            out.extend(p..p + n_u);
        }
    }
}

/// KKT residual norms of a primal-dual point of the problem.
pub fn eval_kkt(
    problem: &OcpProblem,
    w: &[f64],
    lam: &[f64],
    mu: &[f64],
    z_lower: &[f64],
    z_upper: &[f64],
) -> KktNorms {
    kkt_norms(problem, w, lam, mu, z_lower, z_upper)
}

impl Nlp for OcpProblem {
    fn n(&self) -> usize {
        self.n_primary + self.n_slack
    }

    fn m_eq(&self) -> usize {
        self.m_eq
    }

    fn m_ineq(&self) -> usize {
        self.m_ineq
    }

    fn var_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (n_x, n_u) = (self.model.n_x, self.model.n_u);
        let mut lo = vec![f64::NEG_INFINITY; self.n()];
        let mut up = vec![f64::INFINITY; self.n()];
        for c in 0..self.n_scenarios() {
            for i in 0..=self.tree.n {
                if i > 0 && self.n_slack == 0 {
                    let k = self.z_index(c, i);
                    for j in 0..n_x {
                        lo[k + j] = self.model.x_bounds[j].0 / self.model.x_scale[j];
                        up[k + j] = self.model.x_bounds[j].1 / self.model.x_scale[j];
                    }
                }
                if i < self.tree.n {
                    let k = self.nu_index(c, i);
                    for j in 0..n_u {
                        lo[k + j] = self.model.u_bounds[j].0 / self.model.u_scale[j];
                        up[k + j] = self.model.u_bounds[j].1 / self.model.u_scale[j];
                    }
                }
            }
        }
        for k in self.n_primary..self.n() {
            lo[k] = 0.0;
        }
        (lo, up)
    }

    fn initial_point(&self) -> Vec<f64> {
        let mut w = self.default_initial_point();
        w.resize(self.n(), 1e-3);
        w
    }

    fn jac_eq_pattern(&self) -> Vec<(usize, usize)> {
        let (n_x, n_u) = (self.model.n_x, self.model.n_u);
        let n = self.tree.n;
        let mut pat = Vec::new();
        for c in 0..self.n_scenarios() {
            let z0 = self.z_index(c, 0);
            for j in 0..n_x {
                pat.push((c * n_x + j, z0 + j));
            }
        }
        for c in 0..self.n_scenarios() {
            for i in 0..n {
                let z = self.z_index(c, i);
                let zn = self.z_index(c, i + 1);
                for j in 0..n_x {
                    let row = self.row_dyn + (c * n + i) * n_x + j;
                    for v in 0..n_x + n_u {
                        pat.push((row, z + v));
                    }
                    pat.push((row, zn + j));
                }
            }
        }
        for (k, p) in self.nac.iter().enumerate() {
            let (a, b) = (self.nu_index(p.a, p.stage), self.nu_index(p.b, p.stage));
            for j in 0..n_u {
                let row = self.row_nac + k * n_u + j;
                pat.push((row, a + j));
                pat.push((row, b + j));
            }
        }
        pat
    }

    fn jac_ineq_pattern(&self) -> Vec<(usize, usize)> {
        let n_x = self.model.n_x;
        let mut pat = Vec::new();
        for c in 0..self.n_scenarios() {
            let z = self.z_index(c, self.tree.n);
            for j in 0..n_x {
                pat.push((c, z + j));
            }
        }
        if self.n_slack > 0 {
            let base = self.n_scenarios();
            for c in 0..self.n_scenarios() {
                for i in 1..=self.tree.n {
                    let z = self.z_index(c, i);
                    let s = self.slack_index(c, i);
                    for j in 0..n_x {
                        let r = base + 2 * (s - self.n_primary + j);
                        pat.push((r, z + j));
                        pat.push((r, s + j));
                        pat.push((r + 1, z + j));
                        pat.push((r + 1, s + j));
                    }
                }
            }
        }
        pat
    }

    fn hess_pattern(&self) -> Vec<(usize, usize)> {
        let mut pat = Vec::new();
        let mut vars = Vec::new();
        for c in 0..self.n_scenarios() {
            for i in 0..self.tree.n {
                self.stage_block_vars(c, i, &mut vars);
                for a in 0..vars.len() {
                    for b in a..vars.len() {
                        pat.push((vars[a].min(vars[b]), vars[a].max(vars[b])));
                    }
                }
            }
            let z = self.z_index(c, self.tree.n);
            for a in 0..self.model.n_x {
                for b in a..self.model.n_x {
                    pat.push((z + a, z + b));
                }
            }
        }
        pat
    }

    fn eval_values(&self, w: &[f64], h: &mut [f64], g: &mut [f64]) -> f64 {
        let (n_x, n_u) = (self.model.n_x, self.model.n_u);
        let n = self.tree.n;
        let xs = &self.model.x_scale;
        let mut f = 0.0;
        for c in 0..self.n_scenarios() {
            let r = self.tree.leaf_realization(c);
            let z0 = self.z_index(c, 0);
            for j in 0..n_x {
                h[c * n_x + j] = w[z0 + j] - self.x_k[j] / xs[j];
            }
            let mut fc = 0.0;
            let mut u_prev = self.u_prev.clone();
            for i in 0..n {
                let z = self.state(w, c, i);
                let nu = self.input(w, c, i);
                let d = &self.model.realizations[self.stage_realization(c, i)].d;
                let row = self.row_dyn + (c * n + i) * n_x;
                let zn = self.z_index(c, i + 1);
                match self.model.step(&z, &nu, d) {
                    Ok(next) => {
                        for j in 0..n_x {
                            h[row + j] = next[j] / xs[j] - w[zn + j];
                        }
                    }
                    Err(_) => h[row..row + n_x].iter_mut().for_each(|v| *v = f64::NAN),
                }
                fc += stage_cost_with_prev(&self.model, &z, &nu, &u_prev, &self.refs[r]) - self.l_f[r];
                u_prev = nu;
            }
            let zn = self.state(w, c, n);
            fc += self.ingredients.terminal_cost(r, &zn);
            let c_f = self.ingredients.radius(r);
            let x_f = self.ingredients.x_f(r);
            g[c] = zn.iter().zip(x_f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (c_f * c_f) - 1.0;
            if let Some(weight) = self.options.slack_weight {
                for i in 1..=n {
                    let s = self.slack_index(c, i);
                    let z = self.z_index(c, i);
                    for j in 0..n_x {
                        fc += weight * w[s + j] * xs[j];
                        let row = self.m_ineq - 2 * self.n_slack + 2 * (s - self.n_primary + j);
                        let (lo, hi) = self.model.x_bounds[j];
                        g[row] = lo / xs[j] - w[z + j] - w[s + j];
                        g[row + 1] = w[z + j] - hi / xs[j] - w[s + j];
                    }
                }
            }
            f += self.tree.weights[c] * fc;
        }
        for (k, p) in self.nac.iter().enumerate() {
            let (a, b) = (self.nu_index(p.a, p.stage), self.nu_index(p.b, p.stage));
            for j in 0..n_u {
                h[self.row_nac + k * n_u + j] = w[a + j] - w[b + j];
            }
        }
        f
    }

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
    ) {
        let (n_x, n_u) = (self.model.n_x, self.model.n_u);
        let n = self.tree.n;
        let nv = n_x + n_u;
        let nc = n_x + 2 * n_u;
        let xs = &self.model.x_scale;
        let sc = &self.scale;
        grad.iter_mut().for_each(|v| *v = 0.0);
        let mut je = 0;
        for _ in 0..self.n_scenarios() {
            for _ in 0..n_x {
                jac_eq[je] = 1.0;
                je += 1;
            }
        }
        let mut hk = 0;
        let mut vars = Vec::with_capacity(nc);
        let mut ji = 0;
        for c in 0..self.n_scenarios() {
            let r = self.tree.leaf_realization(c);
            let wc = self.tree.weights[c];
            let of = obj_factor * wc;
            for i in 0..n {
                let z = self.state(w, c, i);
                let nu = self.input(w, c, i);
                let d = &self.model.realizations[self.stage_realization(c, i)].d;
                let sd = step_derivatives(&self.model, &z, &nu, d);
                let u_prev = if self.model.uses_du { Some(self.u_prev_of(w, c, i)) } else { None };
                let cd = cost_derivatives(&self.model, &z, &nu, u_prev.as_deref(), &self.refs[r]);
                self.stage_block_vars(c, i, &mut vars);
                let nb = vars.len();
                // Local block order (z_i, nu_i, nu_{i-1}) matches the cost layout (x, u, u_prev).
                for a in 0..nb {
                    grad[vars[a]] += wc * cd.grad[a] * sc[vars[a]];
                }
                let row = self.row_dyn + (c * n + i) * n_x;
                for j in 0..n_x {
                    for v in 0..nv {
                        jac_eq[je] = sd.jac[j][v] * sc[vars[v]] / xs[j];
                        je += 1;
                    }
                    jac_eq[je] = -1.0;
                    je += 1;
                }
                for a in 0..nb {
                    for b in a..nb {
                        let mut v = of * cd.hess[a * nc + b];
                        if a < nv && b < nv {
                            for j in 0..n_x {
                                let l = lam_eq[row + j];
                                if l != 0.0 {
                                    v += l / xs[j] * sd.hess[j][a * nv + b];
                                }
                            }
                        }
                        hess[hk] = v * sc[vars[a]] * sc[vars[b]];
                        hk += 1;
                    }
                }
            }
            // Terminal cost and ball.
            let zi = self.z_index(c, n);
            let zn = self.state(w, c, n);
            let x_f = self.ingredients.x_f(r);
            let p = &self.ingredients.per[r].p;
            let c_f = self.ingredients.radius(r);
            let inv = 1.0 / (c_f * c_f);
            for a in 0..n_x {
                let mut gpsi = 0.0;
                for b in 0..n_x {
                    gpsi += (p[(a, b)] + p[(b, a)]) * (zn[b] - x_f[b]);
                }
                grad[zi + a] += wc * gpsi * sc[zi + a];
                jac_ineq[ji] = 2.0 * (zn[a] - x_f[a]) * inv * sc[zi + a];
                ji += 1;
            }
            for a in 0..n_x {
                for b in a..n_x {
                    let mut v = of * (p[(a, b)] + p[(b, a)]);
                    if a == b {
                        v += lam_ineq[c] * 2.0 * inv;
                    }
                    hess[hk] = v * sc[zi + a] * sc[zi + b];
                    hk += 1;
                }
            }
            if let Some(weight) = self.options.slack_weight {
                for i in 1..=n {
                    let s = self.slack_index(c, i);
                    for j in 0..n_x {
                        grad[s + j] += wc * weight * xs[j];
                    }
                }
            }
        }
        if self.n_slack > 0 {
            for _ in 0..self.n_slack {
                jac_ineq[ji..ji + 4].copy_from_slice(&[-1.0, -1.0, 1.0, -1.0]);
                ji += 4;
            }
        }
        for _ in 0..self.nac.len() {
            for _ in 0..n_u {
                jac_eq[je] = 1.0;
                jac_eq[je + 1] = -1.0;
                je += 2;
            }
        }
    }
}

impl ParametricNlp for OcpProblem {
    fn param(&self) -> Vec<f64> {
        self.x_k.clone()
    }

    fn param_jacobian(&self, _w: &[f64], _lam_eq: &[f64], _mu: &[f64]) -> ParamJacobian {
        let n_x = self.model.n_x;
        let dh = (0..n_x)
            .map(|j| (0..self.n_scenarios()).map(|c| (c * n_x + j, -1.0 / self.model.x_scale[j])).collect())
            .collect();
        ParamJacobian { dgrad: vec![Vec::new(); n_x], dh, dg: vec![Vec::new(); n_x] }
    }
}

//! Primal-dual interior-point method.
//!
//! General inequalities get slacks, g(w) + s = 0 with s >= 0, and bounds are
//! handled by logarithmic barriers with primal-dual multipliers. Each iteration
//! solves the condensed KKT system
//!
//! ```text
//! [ H + Sigma + dw I   Jh'      Jg'            ] [dw ]   [ r_w ]
//! [ Jh                -dc I     0              ] [dl ] = [ -h  ]
//! [ Jg                 0       -S/nu - dc I    ] [dnu]   [ -g - mu/nu ]
//! ```
//!
//! with a sparse LDL^T factorization whose inertia drives the Hessian
//! regularization dw. Steps are globalized by an l1 merit line search.

use std::time::Instant;

use log::debug;

use super::ldl::{NumericLdl, PatternBuilder, SymbolicLdl};
use super::{kkt_norms, Nlp, PrimalDualSolution, SolverOptions, WarmStart};
use crate::error::SolverError;

const KAPPA_EPS: f64 = 10.0;
const KAPPA_MU: f64 = 0.2;
const THETA_MU: f64 = 1.5;
const KAPPA_SIGMA: f64 = 1e10;
const ARMIJO: f64 = 1e-4;
/// Second-order corrections per iteration, and the violation decrease each must achieve.
const MAX_SOC: usize = 4;
const KAPPA_SOC: f64 = 0.99;
const STATIC_REG: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-13;

/// Fixed structure of a problem's KKT matrix.
pub struct KktStructure {
    pub n: usize,
    pub me: usize,
    pub mi: usize,
    pub jac_eq_pat: Vec<(usize, usize)>,
    pub jac_in_pat: Vec<(usize, usize)>,
    pub hess_pat: Vec<(usize, usize)>,
    pub hess_slot: Vec<usize>,
    pub jac_eq_slot: Vec<usize>,
    pub jac_in_slot: Vec<usize>,
    pub n_slots: usize,
    pub symbolic: SymbolicLdl,
}

impl KktStructure {
    pub fn new<P: Nlp + ?Sized>(p: &P) -> Self {
        let (n, me, mi) = (p.n(), p.m_eq(), p.m_ineq());
        let jac_eq_pat = p.jac_eq_pattern();
        let jac_in_pat = p.jac_ineq_pattern();
        let hess_pat = p.hess_pattern();
        let mut pb = PatternBuilder::new(n + me + mi);
        let hess_slot = hess_pat.iter().map(|&(i, j)| pb.slot(i, j)).collect();
        let jac_eq_slot = jac_eq_pat.iter().map(|&(r, c)| pb.slot(n + r, c)).collect();
        let jac_in_slot = jac_in_pat.iter().map(|&(r, c)| pb.slot(n + me + r, c)).collect();
        let n_slots = pb.n_slots();
        let symbolic = SymbolicLdl::analyze(&pb, true);
        Self { n, me, mi, jac_eq_pat, jac_in_pat, hess_pat, hess_slot, jac_eq_slot, jac_in_slot, n_slots, symbolic }
    }

    pub fn dim(&self) -> usize {
        self.n + self.me + self.mi
    }

    pub fn expected_signs(&self) -> Vec<f64> {
        let mut s = vec![1.0; self.n];
        s.resize(self.dim(), -1.0);
        s
    }

    /// Factorizes with a static regularization and returns the factor.
    pub fn factor_regularized(&self, values: &[f64]) -> NumericLdl {
        let mut reg = values.to_vec();
        for i in 0..self.n {
            reg[i] += STATIC_REG;
        }
        for i in self.n..self.dim() {
            reg[i] -= STATIC_REG;
        }
        self.symbolic.factor(&reg, &self.expected_signs(), PIVOT_TOL, 1e-8)
    }
}

/// Scaled problem data at the current iterate.
struct Eval {
    f: f64,
    h: Vec<f64>,
    g: Vec<f64>,
    grad: Vec<f64>,
    jac_eq: Vec<f64>,
    jac_in: Vec<f64>,
    hess: Vec<f64>,
}

/// Newton step of the primal-dual iterate.
struct Step {
    dw: Vec<f64>,
    dlam: Vec<f64>,
    dnu: Vec<f64>,
    ds: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
}

struct Iterate {
    w: Vec<f64>,
    s: Vec<f64>,
    lam: Vec<f64>,
    nu: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves the NLP from the problem's initial point or a warm start.
pub fn solve<P: Nlp + ?Sized>(
    p: &P,
    opts: &SolverOptions,
    warm: Option<&WarmStart>,
) -> Result<PrimalDualSolution, SolverError> {
    let kkt = KktStructure::new(p);
    solve_with_structure(p, &kkt, opts, warm)
}

pub(crate) fn solve_with_structure<P: Nlp + ?Sized>(
    p: &P,
    kkt: &KktStructure,
    opts: &SolverOptions,
    warm: Option<&WarmStart>,
) -> Result<PrimalDualSolution, SolverError> {
    let start = Instant::now();
    let (n, me, mi) = (kkt.n, kkt.me, kkt.mi);
    let (lo, up) = p.var_bounds();
    if lo.len() != n || up.len() != n {
        return Err(SolverError::Invalid("bound vectors have wrong length".into()));
    }
    if lo.iter().zip(&up).any(|(l, u)| l > u) {
        return Err(SolverError::Invalid("empty variable bounds".into()));
    }
    let has_lo: Vec<bool> = lo.iter().map(|v| v.is_finite()).collect();
    let has_up: Vec<bool> = up.iter().map(|v| v.is_finite()).collect();
    let n_bounds = has_lo.iter().filter(|&&b| b).count() + has_up.iter().filter(|&&b| b).count();

    // Initial primal point pushed into the interior of the bounds.
    let push = if warm.is_some() { opts.warm_bound_push } else { opts.bound_push };
    let mut w = match warm {
        Some(ws) if ws.w.len() == n => ws.w.clone(),
        _ => p.initial_point(),
    };
    for i in 0..n {
        let (l, u) = (lo[i], up[i]);
        if l == u {
            return Err(SolverError::Invalid(format!("variable {i} has equal bounds")));
        }
        let range = if has_lo[i] && has_up[i] { u - l } else { f64::INFINITY };
        if has_lo[i] {
            let pl = (push * l.abs().max(1.0)).min(push * range);
            w[i] = w[i].max(l + pl);
        }
        if has_up[i] {
            let pu = (push * u.abs().max(1.0)).min(push * range);
            w[i] = w[i].min(u - pu);
        }
    }

    // Gradient-based scaling from the starting point.
    let mut h0 = vec![0.0; me];
    let mut g0 = vec![0.0; mi];
    let f0 = p.eval_values(&w, &mut h0, &mut g0);
    if !f0.is_finite() || h0.iter().chain(&g0).any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let mut grad0 = vec![0.0; n];
    let mut je0 = vec![0.0; kkt.jac_eq_pat.len()];
    let mut ji0 = vec![0.0; kkt.jac_in_pat.len()];
    let mut hs0 = vec![0.0; kkt.hess_pat.len()];
    p.eval_derivs(&w, 1.0, &vec![0.0; me], &vec![0.0; mi], &mut grad0, &mut je0, &mut ji0, &mut hs0);
    let (obj_scale, eq_scale, in_scale) = if opts.scaling {
        let sf = (100.0 / inf_norm(&grad0).max(1e-300)).min(1.0);
        let mut de = vec![0.0f64; me];
        for (k, &(r, _)) in kkt.jac_eq_pat.iter().enumerate() {
            de[r] = de[r].max(je0[k].abs());
        }
        let mut di = vec![0.0f64; mi];
        for (k, &(r, _)) in kkt.jac_in_pat.iter().enumerate() {
            di[r] = di[r].max(ji0[k].abs());
        }
        let sc = |v: f64| if v > 0.0 { (100.0 / v).min(1.0) } else { 1.0 };
        (sf.max(1e-8), de.into_iter().map(sc).collect::<Vec<_>>(), di.into_iter().map(sc).collect::<Vec<_>>())
    } else {
        (1.0, vec![1.0; me], vec![1.0; mi])
    };

    let eval_scaled_values = |w: &[f64], h: &mut [f64], g: &mut [f64]| -> Option<f64> {
        let f = p.eval_values(w, h, g);
        for r in 0..me {
            h[r] *= eq_scale[r];
        }
        for r in 0..mi {
            g[r] *= in_scale[r];
        }
        if f.is_finite() && h.iter().chain(g.iter()).all(|v| v.is_finite()) {
            Some(f * obj_scale)
        } else {
            None
        }
    };

    let mut mu = if warm.is_some() { opts.warm_mu_init } else { opts.mu_init };
    let mu_min = opts.tol / 10.0;

    let mut ev = Eval {
        f: 0.0,
        h: vec![0.0; me],
        g: vec![0.0; mi],
        grad: vec![0.0; n],
        jac_eq: vec![0.0; kkt.jac_eq_pat.len()],
        jac_in: vec![0.0; kkt.jac_in_pat.len()],
        hess: vec![0.0; kkt.hess_pat.len()],
    };
    ev.f = eval_scaled_values(&w, &mut ev.h, &mut ev.g).ok_or(SolverError::NonFinite)?;

    let s: Vec<f64> = ev.g.iter().map(|&gv| (-gv).max(push.max(mu.sqrt() * 1e-2))).collect();
    let mut it = Iterate {
        lam: vec![0.0; me],
        nu: s.iter().map(|&sv| mu / sv).collect(),
        zl: (0..n).map(|i| if has_lo[i] { mu / (w[i] - lo[i]) } else { 0.0 }).collect(),
        zu: (0..n).map(|i| if has_up[i] { mu / (up[i] - w[i]) } else { 0.0 }).collect(),
        w,
        s,
    };
    if let Some(ws) = warm {
        if let Some(l) = &ws.lam_eq {
            if l.len() == me {
                for r in 0..me {
                    it.lam[r] = l[r] * obj_scale / eq_scale[r];
                }
            }
        }
        if let Some(v) = &ws.lam_ineq {
            if v.len() == mi {
                for r in 0..mi {
                    let given = v[r] * obj_scale / in_scale[r];
                    it.nu[r] = given.max(mu / it.s[r] * 1e-2).max(1e-12);
                }
            }
        }
        for (given, z, has, dist) in [
            (&ws.z_lower, &mut it.zl, &has_lo, (0..n).map(|i| it.w[i] - lo[i]).collect::<Vec<_>>()),
            (&ws.z_upper, &mut it.zu, &has_up, (0..n).map(|i| up[i] - it.w[i]).collect::<Vec<_>>()),
        ] {
            if let Some(gz) = given {
                if gz.len() == n {
                    for i in 0..n {
                        if has[i] {
                            z[i] = (gz[i] * obj_scale).max(mu / dist[i] * 1e-2).max(1e-12);
                        }
                    }
                }
            }
        }
    }

    let dim = kkt.dim();
    let mut values = vec![0.0; kkt.n_slots];
    let mut rhs = vec![0.0; dim];
    let mut sol = vec![0.0; dim];
    let mut delta_w_last = 0.0f64;
    let mut rho = 1.0f64;
    let mut iter = 0usize;
    let mut r_d = vec![0.0; n];

    loop {
        // Derivatives at the current iterate (multipliers mapped to the unscaled problem).
        let lam_eff: Vec<f64> = (0..me).map(|r| it.lam[r] * eq_scale[r]).collect();
        let nu_eff: Vec<f64> = (0..mi).map(|r| it.nu[r] * in_scale[r]).collect();
        p.eval_derivs(&it.w, obj_scale, &lam_eff, &nu_eff, &mut ev.grad, &mut ev.jac_eq, &mut ev.jac_in, &mut ev.hess);
        for v in ev.grad.iter_mut() {
            *v *= obj_scale;
        }
        for (k, &(r, _)) in kkt.jac_eq_pat.iter().enumerate() {
            ev.jac_eq[k] *= eq_scale[r];
        }
        for (k, &(r, _)) in kkt.jac_in_pat.iter().enumerate() {
            ev.jac_in[k] *= in_scale[r];
        }
        if ev.grad.iter().chain(&ev.jac_eq).chain(&ev.jac_in).chain(&ev.hess).any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }

        // Residuals.
        r_d.copy_from_slice(&ev.grad);
        for (k, &(r, c)) in kkt.jac_eq_pat.iter().enumerate() {
            r_d[c] += ev.jac_eq[k] * it.lam[r];
        }
        for (k, &(r, c)) in kkt.jac_in_pat.iter().enumerate() {
            r_d[c] += ev.jac_in[k] * it.nu[r];
        }
        for i in 0..n {
            r_d[i] += it.zu[i] - it.zl[i];
        }
        let inf_pr = inf_norm(&ev.h).max((0..mi).fold(0.0f64, |m, r| m.max((ev.g[r] + it.s[r]).abs())));
        let sum_mult: f64 =
            it.lam.iter().chain(&it.nu).map(|v| v.abs()).sum::<f64>() + it.zl.iter().chain(&it.zu).sum::<f64>();
        let n_mult = (me + mi + n_bounds).max(1) as f64;
        let s_d = (sum_mult / n_mult).max(100.0) / 100.0;
        let z_sum: f64 = it.zl.iter().chain(&it.zu).chain(&it.nu).sum();
        let s_c = (z_sum / ((n_bounds + mi).max(1) as f64)).max(100.0) / 100.0;
        let compl = |target: f64| -> f64 {
            let mut m = 0.0f64;
            for i in 0..n {
                if has_lo[i] {
                    m = m.max(((it.w[i] - lo[i]) * it.zl[i] - target).abs());
                }
                if has_up[i] {
                    m = m.max(((up[i] - it.w[i]) * it.zu[i] - target).abs());
                }
            }
            for r in 0..mi {
                m = m.max((it.s[r] * it.nu[r] - target).abs());
            }
            m
        };
        let inf_du = inf_norm(&r_d);
        let err0 = (inf_du / s_d).max(inf_pr).max(compl(0.0) / s_c);
        debug!(
            "iter {iter:3} f={:.6e} inf_pr={inf_pr:.2e} inf_du={inf_du:.2e} mu={mu:.1e} err={err0:.2e}",
            ev.f / obj_scale
        );
        if err0 <= opts.tol {
            break;
        }
        if iter >= opts.max_iter {
            return Err(failure(p, &it.w, inf_pr, inf_du, iter, true, &eq_scale, &in_scale, &ev));
        }
        if ev.f / obj_scale < -1e20 {
            return Err(SolverError::Unbounded { value: ev.f / obj_scale });
        }
        loop {
            let err_mu = (inf_du / s_d).max(inf_pr).max(compl(mu) / s_c);
            if mu > mu_min && err_mu <= KAPPA_EPS * mu {
                mu = (KAPPA_MU * mu).min(mu.powf(THETA_MU)).max(mu_min);
            } else {
                break;
            }
        }

        // Assemble the KKT matrix (without delta_w) and right-hand side.
        values.iter_mut().for_each(|v| *v = 0.0);
        for (k, &slot) in kkt.hess_slot.iter().enumerate() {
            values[slot] += ev.hess[k];
        }
        for i in 0..n {
            let mut sig = 0.0;
            if has_lo[i] {
                sig += it.zl[i] / (it.w[i] - lo[i]);
            }
            if has_up[i] {
                sig += it.zu[i] / (up[i] - it.w[i]);
            }
            values[i] += sig;
        }
        for (k, &slot) in kkt.jac_eq_slot.iter().enumerate() {
            values[slot] += ev.jac_eq[k];
        }
        for (k, &slot) in kkt.jac_in_slot.iter().enumerate() {
            values[slot] += ev.jac_in[k];
        }
        for r in 0..mi {
            values[n + me + r] -= it.s[r] / it.nu[r];
        }
        for i in 0..n {
            let mut b = -(r_d[i] + it.zl[i] - it.zu[i]);
            if has_lo[i] {
                b += mu / (it.w[i] - lo[i]);
            }
            if has_up[i] {
                b -= mu / (up[i] - it.w[i]);
            }
            rhs[i] = b;
        }
        for r in 0..me {
            rhs[n + r] = -ev.h[r];
        }
        for r in 0..mi {
            rhs[n + me + r] = -ev.g[r] - mu / it.nu[r];
        }

        // Inertia correction.
        let mut delta_w = 0.0f64;
        let mut delta_c = 0.0f64;
        let mut trial_vals = values.clone();
        let factor = loop {
            trial_vals.copy_from_slice(&values);
            for i in 0..n {
                trial_vals[i] += delta_w;
            }
            for r in 0..me {
                trial_vals[n + r] -= delta_c;
            }
            let f = kkt.factor_regularized(&trial_vals);
            let ok = f.n_neg == me + mi && f.n_tiny == 0;
            if ok {
                break f;
            }
            if f.n_tiny > 0 && delta_c == 0.0 && me > 0 {
                delta_c = 1e-8 * mu.powf(0.25);
            }
            if f.n_neg != me + mi || f.n_tiny > 0 {
                delta_w = if delta_w == 0.0 {
                    if delta_w_last == 0.0 {
                        1e-4
                    } else {
                        (delta_w_last / 3.0).max(1e-20)
                    }
                } else if delta_w_last == 0.0 {
                    delta_w * 100.0
                } else {
                    delta_w * 8.0
                };
            }
            if delta_w > 1e40 {
                return Err(SolverError::SingularKkt(format!("inertia correction failed at iteration {iter}")));
            }
        };
        if delta_w > 0.0 {
            delta_w_last = delta_w;
        }
        kkt.symbolic.solve_refined(&factor, &trial_vals, &rhs, &mut sol, 3);
        let c_in0: Vec<f64> = (0..mi).map(|r| ev.g[r] + it.s[r]).collect();
        let step_from = |sol: &[f64], c_in: &[f64]| -> Step {
            let (dw, rest) = sol.split_at(n);
            let (dlam, dnu) = rest.split_at(me);
            let mut jg_dw = vec![0.0; mi];
            for (k, &(r, c)) in kkt.jac_in_pat.iter().enumerate() {
                jg_dw[r] += ev.jac_in[k] * dw[c];
            }
            let ds = (0..mi).map(|r| -c_in[r] - jg_dw[r]).collect();
            let dzl = (0..n)
                .map(|i| {
                    if has_lo[i] {
                        let d = it.w[i] - lo[i];
                        mu / d - it.zl[i] - it.zl[i] / d * dw[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let dzu = (0..n)
                .map(|i| {
                    if has_up[i] {
                        let d = up[i] - it.w[i];
                        mu / d - it.zu[i] + it.zu[i] / d * dw[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            Step { dw: dw.to_vec(), dlam: dlam.to_vec(), dnu: dnu.to_vec(), ds, dzl, dzu }
        };

        // Fraction to the boundary.
        let tau = (1.0 - mu).max(0.99);
        let max_steps = |st: &Step| -> (f64, f64) {
            let mut a_pri = 1.0f64;
            let mut a_du = 1.0f64;
            for i in 0..n {
                if has_lo[i] && st.dw[i] < 0.0 {
                    a_pri = a_pri.min(-tau * (it.w[i] - lo[i]) / st.dw[i]);
                }
                if has_up[i] && st.dw[i] > 0.0 {
                    a_pri = a_pri.min(tau * (up[i] - it.w[i]) / st.dw[i]);
                }
                if has_lo[i] && st.dzl[i] < 0.0 {
                    a_du = a_du.min(-tau * it.zl[i] / st.dzl[i]);
                }
                if has_up[i] && st.dzu[i] < 0.0 {
                    a_du = a_du.min(-tau * it.zu[i] / st.dzu[i]);
                }
            }
            for r in 0..mi {
                if st.ds[r] < 0.0 {
                    a_pri = a_pri.min(-tau * it.s[r] / st.ds[r]);
                }
                if st.dnu[r] < 0.0 {
                    a_du = a_du.min(-tau * it.nu[r] / st.dnu[r]);
                }
            }
            (a_pri, a_du)
        };
        let mut step = step_from(&sol, &c_in0);
        let (a_pri, mut a_du) = max_steps(&step);

        // l1 merit function with barrier terms.
        let barrier = |w: &[f64], s: &[f64]| -> f64 {
            let mut b = 0.0;
            for i in 0..n {
                if has_lo[i] {
                    b -= (w[i] - lo[i]).ln();
                }
                if has_up[i] {
                    b -= (up[i] - w[i]).ln();
                }
            }
            for &sv in s {
                b -= sv.ln();
            }
            mu * b
        };
        let viol = |h: &[f64], g: &[f64], s: &[f64]| -> f64 {
            h.iter().map(|v| v.abs()).sum::<f64>() + g.iter().zip(s).map(|(a, b)| (a + b).abs()).sum::<f64>()
        };
        let c0 = viol(&ev.h, &ev.g, &it.s);
        let mut grad_phi = 0.0;
        for i in 0..n {
            let mut gi = ev.grad[i];
            if has_lo[i] {
                gi -= mu / (it.w[i] - lo[i]);
            }
            if has_up[i] {
                gi += mu / (up[i] - it.w[i]);
            }
            grad_phi += gi * step.dw[i];
        }
        for r in 0..mi {
            grad_phi -= mu / it.s[r] * step.ds[r];
        }
        // Curvature along the step (primal block of the factored matrix).
        let mut pwp = 0.0;
        {
            let mut full = vec![0.0; dim];
            full[..n].copy_from_slice(&step.dw);
            let mut y = vec![0.0; dim];
            kkt.symbolic.matvec(&trial_vals, &full, &mut y);
            for i in 0..n {
                pwp += step.dw[i] * y[i];
            }
            for r in 0..mi {
                pwp += it.nu[r] / it.s[r] * step.ds[r] * step.ds[r];
            }
        }
        if c0 > 1e-300 {
            let needed = (grad_phi + 0.5 * pwp.max(0.0)) / (0.9 * c0);
            if needed > rho {
                rho = needed.max(2.0 * rho);
            }
        }
        let phi0 = ev.f + barrier(&it.w, &it.s) + rho * c0;
        let dphi = grad_phi - rho * c0;

        let mut w_trial = vec![0.0; n];
        let mut s_trial = vec![0.0; mi];
        let mut h_trial = vec![0.0; me];
        let mut g_trial = vec![0.0; mi];
        // Merit value and constraint violation at it + alpha * st; fills the trial buffers.
        let try_step = |alpha: f64, st: &Step, w_t: &mut [f64], s_t: &mut [f64], h_t: &mut [f64], g_t: &mut [f64]| {
            for i in 0..n {
                w_t[i] = it.w[i] + alpha * st.dw[i];
            }
            for r in 0..mi {
                s_t[r] = it.s[r] + alpha * st.ds[r];
            }
            let f_t = eval_scaled_values(w_t, h_t, g_t)?;
            let c_t = viol(h_t, g_t, s_t);
            let phi_t = f_t + barrier(w_t, s_t) + rho * c_t;
            phi_t.is_finite().then_some((f_t, phi_t, c_t))
        };
        let armijo = |phi_t: f64, alpha: f64| phi_t <= phi0 + ARMIJO * alpha * dphi.min(0.0) + 1e-14 * phi0.abs();

        let mut alpha = a_pri;
        let mut accepted = None;
        let mut first = true;
        while alpha > 1e-14 {
            let trial = try_step(alpha, &step, &mut w_trial, &mut s_trial, &mut h_trial, &mut g_trial);
            if let Some((f_t, phi_t, _)) = trial {
                if armijo(phi_t, alpha) {
                    accepted = Some(f_t);
                    break;
                }
            }
            // Second-order correction of the full step when it raised the
            // constraint violation (Maratos effect near the solution).
            if std::mem::take(&mut first) && matches!(trial, Some((_, _, c_t)) if c_t >= c0) {
                let mut c_eq: Vec<f64> = (0..me).map(|r| alpha * ev.h[r] + h_trial[r]).collect();
                let mut c_in: Vec<f64> = (0..mi).map(|r| alpha * c_in0[r] + g_trial[r] + s_trial[r]).collect();
                let mut c_prev = trial.map_or(f64::INFINITY, |t| t.2);
                let mut soc_rhs = rhs.clone();
                let mut soc_sol = vec![0.0; dim];
                for _ in 0..MAX_SOC {
                    for r in 0..me {
                        soc_rhs[n + r] = -c_eq[r];
                    }
                    for r in 0..mi {
                        soc_rhs[n + me + r] = -c_in[r] + it.s[r] - mu / it.nu[r];
                    }
                    kkt.symbolic.solve_refined(&factor, &trial_vals, &soc_rhs, &mut soc_sol, 3);
                    let soc = step_from(&soc_sol, &c_in);
                    let (a_soc, a_du_soc) = max_steps(&soc);
                    let Some((f_t, phi_t, c_t)) =
                        try_step(a_soc, &soc, &mut w_trial, &mut s_trial, &mut h_trial, &mut g_trial)
                    else {
                        break;
                    };
                    if armijo(phi_t, alpha) {
                        accepted = Some(f_t);
                        step = soc;
                        alpha = a_soc;
                        a_du = a_du_soc;
                        break;
                    }
                    if c_t > KAPPA_SOC * c_prev {
                        break;
                    }
                    c_prev = c_t;
                    for r in 0..me {
                        c_eq[r] = a_soc * c_eq[r] + h_trial[r];
                    }
                    for r in 0..mi {
                        c_in[r] = a_soc * c_in[r] + g_trial[r] + s_trial[r];
                    }
                }
                if accepted.is_some() {
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(f_new) = accepted else {
            let inf_du = inf_norm(&r_d);
            return Err(failure(p, &it.w, inf_pr, inf_du, iter, false, &eq_scale, &in_scale, &ev));
        };
        let Step { dlam, dnu, dzl, dzu, .. } = step;
        // Update the iterate.
        it.w.copy_from_slice(&w_trial);
        it.s.copy_from_slice(&s_trial);
        ev.f = f_new;
        ev.h.copy_from_slice(&h_trial);
        ev.g.copy_from_slice(&g_trial);
        for r in 0..me {
            it.lam[r] += alpha * dlam[r];
        }
        for r in 0..mi {
            it.nu[r] += a_du * dnu[r];
            let c = mu / it.s[r];
            it.nu[r] = it.nu[r].clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
        }
        for i in 0..n {
            if has_lo[i] {
                it.zl[i] += a_du * dzl[i];
                let c = mu / (it.w[i] - lo[i]);
                it.zl[i] = it.zl[i].clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
            }
            if has_up[i] {
                it.zu[i] += a_du * dzu[i];
                let c = mu / (up[i] - it.w[i]);
                it.zu[i] = it.zu[i].clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
            }
        }
        iter += 1;
    }

    // Unscale multipliers.
    let lam_eq: Vec<f64> = (0..me).map(|r| it.lam[r] * eq_scale[r] / obj_scale).collect();
    let mu_out: Vec<f64> = (0..mi).map(|r| it.nu[r] * in_scale[r] / obj_scale).collect();
    let z_lower: Vec<f64> = it.zl.iter().map(|v| v / obj_scale).collect();
    let z_upper: Vec<f64> = it.zu.iter().map(|v| v / obj_scale).collect();
    let mut h = vec![0.0; me];
    let mut g = vec![0.0; mi];
    let objective = p.eval_values(&it.w, &mut h, &mut g);
    let kkt_n = kkt_norms(p, &it.w, &lam_eq, &mu_out, &z_lower, &z_upper);

    let active_ineq: Vec<usize> = (0..mi).filter(|&r| g[r] >= -opts.act_tol || mu_out[r] > opts.act_mult_tol).collect();
    let active_lower: Vec<usize> =
        (0..n).filter(|&i| has_lo[i] && (it.w[i] - lo[i] <= opts.act_tol || z_lower[i] > opts.act_mult_tol)).collect();
    let active_upper: Vec<usize> =
        (0..n).filter(|&i| has_up[i] && (up[i] - it.w[i] <= opts.act_tol || z_upper[i] > opts.act_mult_tol)).collect();
    let mut sc_margin = f64::INFINITY;
    for &r in &active_ineq {
        sc_margin = sc_margin.min(mu_out[r] + g[r].abs());
    }
    for &i in &active_lower {
        sc_margin = sc_margin.min(z_lower[i] + (it.w[i] - lo[i]).abs());
    }
    for &i in &active_upper {
        sc_margin = sc_margin.min(z_upper[i] + (up[i] - it.w[i]).abs());
    }

    Ok(PrimalDualSolution {
        w: it.w,
        lam_eq,
        mu: mu_out,
        z_lower,
        z_upper,
        g,
        active_ineq,
        active_lower,
        active_upper,
        objective,
        iterations: iter,
        wall_time: start.elapsed().as_secs_f64(),
        kkt: kkt_n,
        sc_margin,
        obj_scale,
        eq_scale,
        ineq_scale: in_scale,
    })
}

/// Classifies a failed run: large primal infeasibility reports the most
/// violated constraint, otherwise max-iterations or line-search failure.
#[allow(clippy::too_many_arguments)]
fn failure<P: Nlp + ?Sized>(
    _p: &P,
    _w: &[f64],
    inf_pr: f64,
    inf_du: f64,
    iter: usize,
    max_iter: bool,
    eq_scale: &[f64],
    in_scale: &[f64],
    ev: &Eval,
) -> SolverError {
    if inf_pr > 1e-4 {
        let mut best = ("equality".to_string(), 0usize, 0.0f64);
        for (r, v) in ev.h.iter().enumerate() {
            let a = v.abs() / eq_scale[r];
            if a > best.2 {
                best = ("equality".into(), r, a);
            }
        }
        for (r, v) in ev.g.iter().enumerate() {
            let a = v.max(0.0) / in_scale[r];
            if a > best.2 {
                best = ("inequality".into(), r, a);
            }
        }
        if best.2 > 1e-4 {
            return SolverError::Infeasible { kind: best.0, index: best.1, violation: best.2 };
        }
    }
    if max_iter {
        SolverError::MaxIterations { iterations: iter, inf_pr, inf_du }
    } else {
        SolverError::RestorationFailure { iteration: iter }
    }
}

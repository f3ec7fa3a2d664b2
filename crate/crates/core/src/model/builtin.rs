//! The example systems: spring-damper-mass, CSTR, quadruple tank, and a
//! linear double integrator used as an exactly solvable test model.

use std::sync::Arc;

use super::{CostRefs, Equations, Realization, Scalar, SystemModel};

/// Mass-spring-damper with a nonlinear hardening spring; d = [h_d].
#[derive(Debug, Clone)]
pub struct SpringDamperMass {
    pub mass: f64,
    pub k0: f64,
    pub q: [f64; 2],
    pub r: f64,
}

impl Equations for SpringDamperMass {
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]) {
        let hd = d[0];
        dx[0] = x[1];
        dx[1] = ((-x[0]).exp() * x[0] * (-self.k0) - x[1] * hd + u[0]) / self.mass;
    }

    fn stage_cost<S: Scalar>(&self, x: &[S], u: &[S], _du: Option<&[S]>, _refs: &CostRefs) -> S {
        x[0] * x[0] * self.q[0] + x[1] * x[1] * self.q[1] + u[0] * u[0] * self.r
    }
}

pub fn spring_damper_mass() -> SystemModel {
    let realizations = [1.0, 2.0, 4.0]
        .iter()
        .map(|&h| Realization { label: format!("h_d={h}"), d: vec![h], prob: 1.0 / 3.0 })
        .collect::<Vec<_>>();
    let mut m = SystemModel {
        name: "spring_mass".into(),
        n_x: 2,
        n_u: 1,
        n_d: 1,
        x_bounds: vec![(-10.0, 10.0), (-4.0, 10.0)],
        u_bounds: vec![(-6.0, 6.0)],
        realizations,
        nominal_index: 1,
        dt: 0.4,
        substeps: 4,
        x_scale: vec![1.0, 1.0],
        u_scale: vec![1.0],
        uses_du: false,
        refs: CostRefs::default(),
        equations: Arc::new(SpringDamperMass { mass: 1.0, k0: 0.33, q: [30.0, 20.0], r: 1.0 }),
    };
    normalize_probabilities(&mut m);
    m
}

/// Klatt-Engell CSTR (cyclopentenol synthesis); d = [E3/R].
///
/// Constants follow the Klatt and Engell benchmark; time is in hours inside the
/// equations, so dt = 18 s = 0.005 h.
#[derive(Debug, Clone)]
pub struct Cstr {
    pub k0: [f64; 3],
    pub e_r: [f64; 2],
    pub dh: [f64; 3],
    pub rho: f64,
    pub cp: f64,
    pub cp_j: f64,
    pub a_r: f64,
    pub v_r: f64,
    pub m_j: f64,
    pub t_in: f64,
    pub k_w: f64,
    pub c_a0: f64,
    /// Weight of the state regularization toward `refs.x_reg` in the
    /// tracking cost; the steady-state anchor overrides it.
    pub reg: f64,
    /// Weights on the increments of (F, Qdot_J).
    pub r_du: [f64; 2],
}

impl Default for Cstr {
    fn default() -> Self {
        Self {
            k0: [1.287e12, 1.287e12, 9.043e9],
            e_r: [9758.3, 9758.3],
            dh: [4.2, -11.0, -41.85],
            rho: 0.9342,
            cp: 3.01,
            cp_j: 2.0,
            a_r: 0.215,
            v_r: 10.01,
            m_j: 5.0,
            t_in: 130.0,
            k_w: 4032.0,
            c_a0: 5.1,
            reg: 1e-2,
            r_du: [1e-5, 1e-7],
        }
    }
}

impl Equations for Cstr {
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]) {
        let (ca, cb, tr, tj) = (x[0], x[1], x[2], x[3]);
        let (f, qj) = (u[0], u[1]);
        let t_abs = tr + 273.15;
        let k1 = (S::cst(-self.e_r[0]) / t_abs).exp() * self.k0[0];
        let k2 = (S::cst(-self.e_r[1]) / t_abs).exp() * self.k0[1];
        let k3 = (S::cst(-d[0]) / t_abs).exp() * self.k0[2];
        let r1 = k1 * ca;
        let r2 = k2 * cb;
        let r3 = k3 * ca * ca;
        dx[0] = f * (S::cst(self.c_a0) - ca) - r1 - r3;
        dx[1] = -(f * cb) + r1 - r2;
        let heat = (r1 * self.dh[0] + r2 * self.dh[1] + r3 * self.dh[2]) / (self.rho * self.cp);
        dx[2] =
            f * (S::cst(self.t_in) - tr) + (tj - tr) * (self.k_w * self.a_r / (self.rho * self.cp * self.v_r)) - heat;
        dx[3] = (qj + (tr - tj) * (self.k_w * self.a_r)) / (self.m_j * self.cp_j);
    }

    fn stage_cost<S: Scalar>(&self, x: &[S], _u: &[S], du: Option<&[S]>, refs: &CostRefs) -> S {
        let e = x[1] - refs.setpoint[0];
        let mut c = e * e;
        let reg = refs.reg_weight.unwrap_or(self.reg);
        for i in 0..4 {
            let r = x[i] - refs.x_reg[i];
            c += r * r * reg;
        }
        if let Some(du) = du {
            c += du[0] * du[0] * self.r_du[0] + du[1] * du[1] * self.r_du[1];
        }
        c
    }
}

/// Operating point listed for the CSTR example: (c_A, c_B, T_R, T_J) and (F, Qdot_J).
pub const CSTR_OPERATING_STATE: [f64; 4] = [0.8, 0.5, 134.14, 134.0];
pub const CSTR_OPERATING_INPUT: [f64; 2] = [18.83, -4495.7];

/// Regularization weight of the steady-state selection toward the operating state.
pub const CSTR_ANCHOR_REG: f64 = 1e-4;

pub fn cstr() -> SystemModel {
    let realizations = [("E3 max", 8774.0), ("E3 nom", 8560.0), ("E3 min", 8346.0)]
        .iter()
        .map(|&(l, e)| Realization { label: l.into(), d: vec![e], prob: 1.0 / 3.0 })
        .collect::<Vec<_>>();
    let mut m = SystemModel {
        name: "cstr".into(),
        n_x: 4,
        n_u: 2,
        n_d: 1,
        x_bounds: vec![(0.1, 5.0), (0.1, 5.9), (50.0, 140.0), (50.0, 180.0)],
        u_bounds: vec![(0.0, 35.0), (-8500.0, 0.0)],
        realizations,
        nominal_index: 1,
        dt: 18.0 / 3600.0,
        substeps: 1,
        x_scale: vec![1.0, 1.0, 100.0, 100.0],
        u_scale: vec![10.0, 1000.0],
        uses_du: true,
        refs: CostRefs { setpoint: vec![0.5], x_reg: CSTR_OPERATING_STATE.to_vec(), reg_weight: Some(CSTR_ANCHOR_REG) },
        equations: Arc::new(Cstr::default()),
    };
    normalize_probabilities(&mut m);
    m
}

/// Quadruple-tank process; d = [gamma_1, gamma_2]. Lengths in cm, time in s.
///
/// Geometry follows the Raff et al. benchmark.
#[derive(Debug, Clone)]
pub struct QuadTank {
    pub a: [f64; 4],
    pub area: [f64; 4],
    pub g: f64,
    pub r_du: f64,
}

impl Default for QuadTank {
    fn default() -> Self {
        Self { a: [0.233, 0.242, 0.127, 0.127], area: [50.27; 4], g: 981.0, r_du: 0.01 }
    }
}

impl Equations for QuadTank {
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]) {
        let (g1, g2) = (d[0], d[1]);
        let out = |i: usize| (x[i] * (2.0 * self.g)).sqrt() * self.a[i];
        let (q1, q2, q3, q4) = (out(0), out(1), out(2), out(3));
        dx[0] = (-q1 + q3 + u[0] * g1) / self.area[0];
        dx[1] = (-q2 + q4 + u[1] * g2) / self.area[1];
        dx[2] = (-q3 + u[1] * (1.0 - g2)) / self.area[2];
        dx[3] = (-q4 + u[0] * (1.0 - g1)) / self.area[3];
    }

    fn stage_cost<S: Scalar>(&self, x: &[S], _u: &[S], du: Option<&[S]>, refs: &CostRefs) -> S {
        let e1 = x[0] - refs.setpoint[0];
        let e2 = x[1] - refs.setpoint[1];
        let mut c = e1 * e1 + e2 * e2;
        if let Some(du) = du {
            c += (du[0] * du[0] + du[1] * du[1]) * self.r_du;
        }
        c
    }
}

pub const QUAD_TANK_GAMMAS: [f64; 3] = [0.35, 0.40, 0.45];

pub fn quad_tank() -> SystemModel {
    let mut realizations = Vec::new();
    for &g1 in &QUAD_TANK_GAMMAS {
        for &g2 in &QUAD_TANK_GAMMAS {
            realizations.push(Realization { label: format!("[{g1:.2};{g2:.2}]"), d: vec![g1, g2], prob: 1.0 / 9.0 });
        }
    }
    let mut m = SystemModel {
        name: "quad_tank".into(),
        n_x: 4,
        n_u: 2,
        n_d: 2,
        x_bounds: vec![(7.5, 28.0), (7.5, 28.0), (14.2, 28.0), (4.5, 21.3)],
        u_bounds: vec![(0.0, 60.0), (0.0, 60.0)],
        realizations,
        nominal_index: 4,
        dt: 10.0,
        substeps: 1,
        x_scale: vec![10.0; 4],
        u_scale: vec![10.0, 10.0],
        uses_du: true,
        refs: CostRefs { setpoint: vec![14.0, 14.0], x_reg: vec![], reg_weight: None },
        equations: Arc::new(QuadTank::default()),
    };
    normalize_probabilities(&mut m);
    m
}

/// Double integrator x1' = x2, x2' = b u with an uncertain input gain d = [b].
///
/// RK4 is exact for this system, so the discrete map is x+ = A x + B u with
/// A = [[1, dt], [0, 1]] and B = b [dt^2/2, dt].
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    pub q: [f64; 2],
    pub r: f64,
}

impl Equations for DoubleIntegrator {
    fn rhs<S: Scalar>(&self, x: &[S], u: &[S], d: &[f64], dx: &mut [S]) {
        dx[0] = x[1];
        dx[1] = u[0] * d[0];
    }

    fn stage_cost<S: Scalar>(&self, x: &[S], u: &[S], _du: Option<&[S]>, _refs: &CostRefs) -> S {
        x[0] * x[0] * self.q[0] + x[1] * x[1] * self.q[1] + u[0] * u[0] * self.r
    }
}

pub fn double_integrator() -> SystemModel {
    let realizations = vec![
        Realization { label: "b=0.8".into(), d: vec![0.8], prob: 0.5 },
        Realization { label: "b=1.2".into(), d: vec![1.2], prob: 0.5 },
    ];
    SystemModel {
        name: "double_integrator".into(),
        n_x: 2,
        n_u: 1,
        n_d: 1,
        x_bounds: vec![(-100.0, 100.0), (-100.0, 100.0)],
        u_bounds: vec![(-100.0, 100.0)],
        realizations,
        nominal_index: 0,
        dt: 0.5,
        substeps: 1,
        x_scale: vec![1.0, 1.0],
        u_scale: vec![1.0],
        uses_du: false,
        refs: CostRefs::default(),
        equations: Arc::new(DoubleIntegrator { q: [1.0, 1.0], r: 0.1 }),
    }
}

/// Looks up a builtin model by name.
pub fn by_name(name: &str) -> Option<SystemModel> {
    match name {
        "spring_mass" | "spring_damper_mass" | "spring-mass" => Some(spring_damper_mass()),
        "cstr" => Some(cstr()),
        "quad_tank" | "quad-tank" | "quadtank" => Some(quad_tank()),
        "double_integrator" | "double-integrator" => Some(double_integrator()),
        _ => None,
    }
}

pub const MODEL_NAMES: [&str; 4] = ["spring_mass", "cstr", "quad_tank", "double_integrator"];

/// Makes uniform thirds/ninths sum to exactly one in floating point.
fn normalize_probabilities(m: &mut SystemModel) {
    let n = m.realizations.len();
    let head: f64 = m.realizations[..n - 1].iter().map(|r| r.prob).sum();
    m.realizations[n - 1].prob = 1.0 - head;
}

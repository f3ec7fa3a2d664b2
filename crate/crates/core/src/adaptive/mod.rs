//! Adaptive horizon update and closed-loop simulation.
//!
//! After each solve, the optimal primal-dual point is carried to every
//! one-step-ahead successor f(x_k, u_k, d^r) with the sensitivity predictor.
//! The stage at which each predicted scenario enters its terminal ball gives
//! the shortest horizon that still reaches the terminal sets; the next horizon
//! adds the safety margin N_min and is capped at N_max.

mod report;
mod sim;

pub use report::{compare_runs, nominal_descent_check, CompareSummary, DescentReport, DescentViolation};
pub use sim::{
    run_closed_loop, ClosedLoopConfig, ClosedLoopLog, DisturbanceSource, LogSummary, RobustHorizon, SolverEvent,
    StepRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::ocp::OcpProblem;
use crate::solver::{predict, PrimalDualSolution, SensitivityOperator};

/// Whether the horizon is held at N_0 or updated after every solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonMode {
    Fixed,
    Adaptive,
}

/// Admissible horizon range and the current horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonState {
    pub n_k: usize,
    pub n_min: usize,
    pub n_max: usize,
}

impl HorizonState {
    /// Starts at N_max. `n_r` is the fixed robust horizon, `None` when the
    /// tree is fully branched (N_R = N_k).
    pub fn new(n_max: usize, n_min: usize, n_r: Option<usize>) -> Result<Self, SimError> {
        if n_min < 1 || n_min > n_max {
            return Err(SimError::Config(format!("need 1 <= N_min <= N_max, got N_min = {n_min}, N_max = {n_max}")));
        }
        if let Some(n_r) = n_r {
            if n_min <= n_r {
                return Err(SimError::Config(format!("N_min = {n_min} must exceed the robust horizon N_R = {n_r}")));
            }
        }
        Ok(Self { n_k: n_max, n_min, n_max })
    }

    /// min(N_max, N_T + N_min), never below N_min.
    pub fn next_horizon(&self, n_t: usize) -> usize {
        (n_t + self.n_min).min(self.n_max).max(self.n_min)
    }
}

/// Outcome of one horizon update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonUpdate {
    pub n_next: usize,
    /// Largest entry stage over all successors and scenarios.
    pub n_t: usize,
    /// N_T(x_{k+1}^r) for every realization r.
    pub successor_n_t: Vec<usize>,
    /// Per scenario, the largest entry stage over the successors (N_max when
    /// some predicted terminal state lies outside its ball).
    pub scenario_entry: Vec<usize>,
    /// Set when the update fell back to N_max without a prediction.
    pub fallback: Option<String>,
}

impl HorizonUpdate {
    /// The safe fallback: N_{k+1} = N_max.
    pub fn fallback(state: &HorizonState, reason: String) -> Self {
        Self { n_next: state.n_max, n_t: state.n_max, fallback: Some(reason), ..Default::default() }
    }
}

/// First stage i >= 1 at which scenario c of the primal point `w` lies in its
/// terminal ball, or `None` when its final state is outside.
pub fn entry_stage(problem: &OcpProblem, w: &[f64], c: usize) -> Option<usize> {
    let ing = &problem.ingredients;
    let r = problem.tree.leaf_realization(c);
    let n = problem.horizon();
    if !ing.in_ball(r, &problem.state(w, c, n)) {
        return None;
    }
    (1..=n).find(|&i| ing.in_ball(r, &problem.state(w, c, i)))
}

/// Horizon update for the problem solved at (x_k, N_k) whose first input u_k
/// was applied.
///
/// For each successor x_{k+1}^r the solution is predicted with the
/// sensitivity operator; N_T(x_{k+1}^r) is the largest entry stage over the
/// scenarios, or N_max if some predicted terminal state misses its ball.
pub fn horizon_update(
    state: &HorizonState,
    problem: &OcpProblem,
    sol: &PrimalDualSolution,
    sens: &SensitivityOperator,
    x_k: &[f64],
    u_k: &[f64],
) -> HorizonUpdate {
    let model = &problem.model;
    let n_c = problem.n_scenarios();
    let mut scenario_entry = vec![0; n_c];
    let mut successor_n_t = Vec::with_capacity(model.n_realizations());
    for real in &model.realizations {
        let x_next = match model.step(x_k, u_k, &real.d) {
            Ok(x) => x,
            Err(e) => return HorizonUpdate::fallback(state, format!("successor for {}: {e}", real.label)),
        };
        let w = predict(sens, sol, &x_next);
        if w.iter().any(|v| !v.is_finite()) {
            return HorizonUpdate::fallback(state, format!("non-finite prediction for {}", real.label));
        }
        let mut n_t = 0;
        for (c, entry) in scenario_entry.iter_mut().enumerate() {
            let e = entry_stage(problem, &w, c).unwrap_or(state.n_max);
            *entry = (*entry).max(e);
            n_t = n_t.max(e);
        }
        successor_n_t.push(n_t);
    }
    let n_t = successor_n_t.iter().copied().max().unwrap_or(state.n_max);
    HorizonUpdate { n_next: state.next_horizon(n_t), n_t, successor_n_t, scenario_entry, fallback: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_horizon_clamps_to_admissible_range() {
        let s = HorizonState::new(8, 2, None).unwrap();
        assert_eq!(s.n_k, 8);
        assert_eq!(s.next_horizon(1), 3);
        assert_eq!(s.next_horizon(0), 2);
        assert_eq!(s.next_horizon(7), 8);
        assert_eq!(s.next_horizon(8), 8);
        for n_t in 0..20 {
            let n = s.next_horizon(n_t);
            assert!((s.n_min..=s.n_max).contains(&n));
        }
    }

    #[test]
    fn n_min_must_exceed_fixed_robust_horizon() {
        assert!(HorizonState::new(40, 5, Some(2)).is_ok());
        assert!(matches!(HorizonState::new(40, 2, Some(2)), Err(SimError::Config(_))));
        assert!(matches!(HorizonState::new(4, 5, None), Err(SimError::Config(_))));
        assert!(matches!(HorizonState::new(4, 0, None), Err(SimError::Config(_))));
    }
}

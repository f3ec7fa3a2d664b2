//! Diagnostics on closed-loop logs.

use serde::{Deserialize, Serialize};

use super::ClosedLoopLog;
use crate::error::SimError;

/// A step where the optimal value did not decrease by the realized stage cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentViolation {
    pub k: usize,
    pub v_k: f64,
    pub v_next: f64,
    pub stage_cost: f64,
    /// V_{k+1} - V_k + l_k, positive on violation.
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// Whether the log applied the nominal realization at every step.
    pub nominal: bool,
    pub tol: f64,
    pub checked: usize,
    pub violations: Vec<DescentViolation>,
}

impl DescentReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Reports every k with V_{N_{k+1}}(x_{k+1}) - V_{N_k}(x_k) > -l(x_k, u_k) + tol,
/// where l is the stage cost shifted by the nominal equilibrium cost.
pub fn nominal_descent_check(log: &ClosedLoopLog, tol: f64) -> DescentReport {
    let nominal = matches!(log.disturbance, super::DisturbanceSource::Nominal);
    let mut violations = Vec::new();
    for pair in log.records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let excess = b.v - a.v + a.stage_cost_shifted;
        if excess > tol {
            violations.push(DescentViolation {
                k: a.k,
                v_k: a.v,
                v_next: b.v,
                stage_cost: a.stage_cost_shifted,
                excess,
            });
        }
    }
    DescentReport { nominal, tol, checked: log.records.len().saturating_sub(1), violations }
}

/// Fixed-versus-adaptive comparison of two runs on the same scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    /// Cumulative stage cost of the second run over that of the first.
    pub cost_ratio: f64,
    /// max_k |x_k^a - x_k^b|_inf.
    pub max_state_dev: f64,
    /// Saving in total solver wall time, in percent of the first run.
    pub time_saving_pct: f64,
    /// Mean over k of the per-iteration saving, in percent.
    pub mean_step_saving_pct: f64,
    /// Saving when the second run's predictor time is counted as well.
    pub time_saving_incl_predictor_pct: f64,
    pub total_solve_ms: [f64; 2],
    pub total_predictor_ms: [f64; 2],
    pub cumulative_stage_cost: [f64; 2],
    pub steps: usize,
}

/// Compares `base` (typically fixed horizon) against `other` (adaptive).
pub fn compare_runs(base: &ClosedLoopLog, other: &ClosedLoopLog) -> Result<CompareSummary, SimError> {
    if base.model != other.model {
        return Err(SimError::Mismatch(format!("models differ: {} vs {}", base.model, other.model)));
    }
    if base.records.len() != other.records.len() {
        return Err(SimError::Mismatch(format!(
            "step counts differ: {} vs {}",
            base.records.len(),
            other.records.len()
        )));
    }
    if base.seed != other.seed || base.disturbance != other.disturbance {
        return Err(SimError::Mismatch("seeds or disturbance sources differ".into()));
    }
    let same_d = base.records.iter().zip(&other.records).all(|(a, b)| a.d_index == b.d_index);
    if !same_d {
        return Err(SimError::Mismatch("disturbance sequences differ".into()));
    }
    if let (Some(a), Some(b)) = (base.records.first(), other.records.first()) {
        if a.x != b.x {
            return Err(SimError::Mismatch("initial states differ".into()));
        }
    }
    let pct = |a: f64, b: f64| if a > 0.0 { 100.0 * (1.0 - b / a) } else { 0.0 };
    let (ca, cb) = (base.cumulative_stage_cost(), other.cumulative_stage_cost());
    let cost_ratio = if ca == cb { 1.0 } else { cb / ca };
    let max_state_dev = base
        .records
        .iter()
        .zip(&other.records)
        .flat_map(|(a, b)| a.x.iter().zip(&b.x).map(|(p, q)| (p - q).abs()))
        .fold(0.0f64, f64::max);
    let (ta, tb) = (base.total_solve_ms(), other.total_solve_ms());
    let steps = base.records.len();
    let mean_step_saving_pct = if steps == 0 {
        0.0
    } else {
        base.records.iter().zip(&other.records).map(|(a, b)| pct(a.solve_ms, b.solve_ms)).sum::<f64>() / steps as f64
    };
    let (pa, pb) = (base.total_predictor_ms(), other.total_predictor_ms());
    Ok(CompareSummary {
        cost_ratio,
        max_state_dev,
        time_saving_pct: pct(ta, tb),
        mean_step_saving_pct,
        time_saving_incl_predictor_pct: pct(ta + pa, tb + pb),
        total_solve_ms: [ta, tb],
        total_predictor_ms: [pa, pb],
        cumulative_stage_cost: [ca, cb],
        steps,
    })
}

//! Closed-loop simulation of fixed- and adaptive-horizon multi-stage MPC.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{horizon_update, HorizonMode, HorizonState, HorizonUpdate};
use crate::error::SimError;
use crate::model::{stage_cost_with_prev, CostRefs, SystemModel};
use crate::ocp::{assemble, OcpOptions, OcpProblem};
use crate::scenario::{build_tree_with_cap, DEFAULT_SCENARIO_CAP};
use crate::solver::ipm::{solve_with_structure, KktStructure};
use crate::solver::sensitivity::sensitivity_with;
use crate::solver::{PrimalDualSolution, SolverOptions};
use crate::terminal::{build_terminal_ingredients_with, stage_refs, TerminalConfig, TerminalIngredients};

/// Robust horizon of the scenario tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustHorizon {
    /// Branch at the first N_R stages, capped at the current horizon.
    Stages(usize),
    /// Branch at every stage (N_R = N_k).
    FullyBranched,
}

impl RobustHorizon {
    pub fn at(&self, n_k: usize) -> usize {
        match *self {
            RobustHorizon::Stages(n_r) => n_r.min(n_k),
            RobustHorizon::FullyBranched => n_k,
        }
    }

    fn fixed(&self) -> Option<usize> {
        match *self {
            RobustHorizon::Stages(n_r) => Some(n_r),
            RobustHorizon::FullyBranched => None,
        }
    }
}

/// How the true parameter d_k is chosen at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisturbanceSource {
    /// i.i.d. draws with the realization probabilities.
    Random,
    /// d_k = d^0 at every step.
    Nominal,
    /// Realization indices, repeated cyclically.
    Scripted(Vec<usize>),
}

/// Everything a closed-loop run depends on.
#[derive(Clone, Debug)]
pub struct ClosedLoopConfig {
    pub model: SystemModel,
    /// Terminal-ingredient synthesis; rerun with a new anchor at setpoint changes.
    pub terminal: TerminalConfig,
    /// Precomputed ingredients for the initial setpoint.
    pub ingredients: Option<Arc<TerminalIngredients>>,
    pub mode: HorizonMode,
    /// N_0 = N_max.
    pub n0: usize,
    pub n_min: usize,
    pub robust: RobustHorizon,
    pub steps: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub u_prev0: Vec<f64>,
    /// (k, x): the plant state is overwritten with x at the start of step k.
    pub pulses: Vec<(usize, Vec<f64>)>,
    /// Whether a pulse resets the horizon to N_max. Off by default: the horizon update
    /// only looks one step ahead and has no notion of external state resets.
    pub pulse_resets_horizon: bool,
    /// (k, setpoint): the tracked setpoint changes at the start of step k.
    pub setpoints: Vec<(usize, Vec<f64>)>,
    pub disturbance: DisturbanceSource,
    pub solver: SolverOptions,
    pub ocp: OcpOptions,
    pub scenario_cap: usize,
    /// Carried into the log for audit.
    pub config_hash: String,
}

impl ClosedLoopConfig {
    pub fn new(model: SystemModel, terminal: TerminalConfig, x0: Vec<f64>, u_prev0: Vec<f64>) -> Self {
        Self {
            model,
            terminal,
            ingredients: None,
            mode: HorizonMode::Adaptive,
            n0: 10,
            n_min: 2,
            robust: RobustHorizon::Stages(1),
            steps: 20,
            seed: 1,
            x0,
            u_prev0,
            pulses: Vec::new(),
            pulse_resets_horizon: false,
            setpoints: Vec::new(),
            disturbance: DisturbanceSource::Random,
            solver: SolverOptions::default(),
            ocp: OcpOptions::default(),
            scenario_cap: DEFAULT_SCENARIO_CAP,
            config_hash: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let m = &self.model;
        m.validate()?;
        if self.x0.len() != m.n_x || self.u_prev0.len() != m.n_u {
            return Err(SimError::Config(format!(
                "x0 has length {} and u_prev0 {}; model `{}` has n_x = {}, n_u = {}",
                self.x0.len(),
                self.u_prev0.len(),
                m.name,
                m.n_x,
                m.n_u
            )));
        }
        if self.n0 < 1 {
            return Err(SimError::Config("N_0 must be positive".into()));
        }
        if let RobustHorizon::Stages(0) = self.robust {
            return Err(SimError::Config("robust horizon must be at least 1".into()));
        }
        if self.mode == HorizonMode::Adaptive {
            HorizonState::new(self.n0, self.n_min, self.robust.fixed())?;
        }
        for (k, x) in &self.pulses {
            if x.len() != m.n_x {
                return Err(SimError::Config(format!("pulse at k = {k} has {} states, expected {}", x.len(), m.n_x)));
            }
        }
        for (k, s) in &self.setpoints {
            if s.len() != self.terminal.anchor.setpoint.len() {
                return Err(SimError::Config(format!("setpoint at k = {k} has the wrong length")));
            }
        }
        if let DisturbanceSource::Scripted(seq) = &self.disturbance {
            if seq.is_empty() || seq.iter().any(|&r| r >= m.n_realizations()) {
                return Err(SimError::Config("scripted disturbance indices must name realizations".into()));
            }
        }
        Ok(())
    }

    /// The realization index applied to the plant at every step.
    pub fn disturbance_sequence(&self) -> Vec<usize> {
        match &self.disturbance {
            DisturbanceSource::Nominal => vec![self.model.nominal_index; self.steps],
            DisturbanceSource::Scripted(seq) => (0..self.steps).map(|k| seq[k % seq.len()]).collect(),
            DisturbanceSource::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let dist = WeightedIndex::new(self.model.probabilities()).expect("probabilities validated");
                (0..self.steps).map(|_| rng.sample(&dist)).collect()
            }
        }
    }
}

/// One closed-loop iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub d_index: usize,
    pub n_k: usize,
    pub n_r: usize,
    pub n_scenarios: usize,
    pub solve_ms: f64,
    pub predictor_ms: f64,
    pub solver_iterations: usize,
    pub cold_retry: bool,
    /// Optimal value V_{N_k}(x_k).
    pub v: f64,
    /// l(x_k, u_k, u_k - u_{k-1}) against the nominal references.
    pub stage_cost: f64,
    /// stage_cost minus the nominal equilibrium cost l(x_f, u_f).
    pub stage_cost_shifted: f64,
    pub horizon: Option<HorizonUpdate>,
}

/// A solver failure; `recovered` tells whether the cold retry succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverEvent {
    pub k: usize,
    pub message: String,
    pub recovered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub model: String,
    pub mode: HorizonMode,
    pub robust: RobustHorizon,
    pub seed: u64,
    pub config_hash: String,
    pub disturbance: DisturbanceSource,
    pub n0: usize,
    pub n_min: usize,
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub records: Vec<StepRecord>,
    /// Plant state after the last applied input.
    pub final_state: Vec<f64>,
    pub solver_events: Vec<SolverEvent>,
    /// Reason the run stopped early, if it did.
    pub aborted: Option<String>,
}

/// Aggregates written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub model: String,
    pub mode: HorizonMode,
    pub robust: RobustHorizon,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub final_state: Vec<f64>,
    pub horizons: Vec<usize>,
    pub total_solve_ms: f64,
    pub total_predictor_ms: f64,
    pub cumulative_stage_cost: f64,
    pub infeasibility_events: usize,
    pub aborted: Option<String>,
}

impl ClosedLoopLog {
    pub fn horizons(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.n_k).collect()
    }

    pub fn total_solve_ms(&self) -> f64 {
        self.records.iter().map(|r| r.solve_ms).sum()
    }

    pub fn total_predictor_ms(&self) -> f64 {
        self.records.iter().map(|r| r.predictor_ms).sum()
    }

    pub fn cumulative_stage_cost(&self) -> f64 {
        self.records.iter().map(|r| r.stage_cost).sum()
    }

    pub fn infeasibility_events(&self) -> usize {
        self.solver_events.len()
    }

    pub fn summary(&self) -> LogSummary {
        LogSummary {
            model: self.model.clone(),
            mode: self.mode,
            robust: self.robust,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            steps: self.records.len(),
            final_state: self.final_state.clone(),
            horizons: self.horizons(),
            total_solve_ms: self.total_solve_ms(),
            total_predictor_ms: self.total_predictor_ms(),
            cumulative_stage_cost: self.cumulative_stage_cost(),
            infeasibility_events: self.infeasibility_events(),
            aborted: self.aborted.clone(),
        }
    }

    /// Column names of the CSV log.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = vec!["k".into(), "t".into()];
        h.extend(self.state_names.iter().cloned());
        h.extend(self.input_names.iter().cloned());
        for s in
            ["d_index", "N_k", "solve_ms", "predictor_ms", "V", "stage_cost", "N_R", "n_scenarios", "N_T", "iterations"]
        {
            h.push(s.into());
        }
        h
    }

    /// One row per iteration: k, t, x..., u..., d_index, N_k, solve_ms,
    /// predictor_ms, V, stage_cost, then N_R, n_scenarios, N_T (empty in
    /// fixed mode) and the solver iteration count.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| SimError::Io(std::io::Error::other(e));
        w.write_record(self.csv_header()).map_err(io)?;
        for r in &self.records {
            let mut row = vec![r.k.to_string(), format!("{}", r.t)];
            row.extend(r.x.iter().map(|v| format!("{v}")));
            row.extend(r.u.iter().map(|v| format!("{v}")));
            row.push(r.d_index.to_string());
            row.push(r.n_k.to_string());
            row.push(format!("{:.3}", r.solve_ms));
            row.push(format!("{:.3}", r.predictor_ms));
            row.push(format!("{}", r.v));
            row.push(format!("{}", r.stage_cost));
            row.push(r.n_r.to_string());
            row.push(r.n_scenarios.to_string());
            row.push(r.horizon.as_ref().map(|h| h.n_t.to_string()).unwrap_or_default());
            row.push(r.solver_iterations.to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<(), SimError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// The CSV with the timing columns blanked, for determinism checks.
    pub fn csv_without_timing(&self) -> String {
        let mut copy = self.clone();
        for r in &mut copy.records {
            r.solve_ms = 0.0;
            r.predictor_ms = 0.0;
        }
        let mut buf = Vec::new();
        copy.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }
}

/// Ingredients per setpoint, rebuilt on demand.
struct IngredientCache {
    entries: Vec<(Vec<f64>, Arc<TerminalIngredients>)>,
}

impl IngredientCache {
    fn get(
        &mut self,
        model: &SystemModel,
        cfg: &TerminalConfig,
        setpoint: &[f64],
    ) -> Result<Arc<TerminalIngredients>, SimError> {
        if let Some((_, ing)) = self.entries.iter().find(|(s, _)| s.as_slice() == setpoint) {
            return Ok(ing.clone());
        }
        let mut cfg = cfg.clone();
        cfg.anchor.setpoint = setpoint.to_vec();
        let ing = Arc::new(build_terminal_ingredients_with(model, &cfg)?);
        self.entries.push((setpoint.to_vec(), ing.clone()));
        Ok(ing)
    }
}

/// Runs the closed loop. Solver failures are retried once from a cold start;
/// a second failure stops the run and is reported in `aborted`.
pub fn run_closed_loop(cfg: &ClosedLoopConfig) -> Result<ClosedLoopLog, SimError> {
    cfg.validate()?;
    let model = &cfg.model;
    let names = |p: &str, n: usize| (1..=n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let mut log = ClosedLoopLog {
        model: model.name.clone(),
        mode: cfg.mode,
        robust: cfg.robust,
        seed: cfg.seed,
        config_hash: cfg.config_hash.clone(),
        disturbance: cfg.disturbance.clone(),
        n0: cfg.n0,
        n_min: cfg.n_min,
        dt: model.dt,
        state_names: names("x", model.n_x),
        input_names: names("u", model.n_u),
        records: Vec::with_capacity(cfg.steps),
        final_state: cfg.x0.clone(),
        solver_events: Vec::new(),
        aborted: None,
    };

    let mut cache = IngredientCache { entries: Vec::new() };
    let mut setpoint = cfg.terminal.anchor.setpoint.clone();
    let mut ingredients = match &cfg.ingredients {
        Some(ing) => {
            cache.entries.push((setpoint.clone(), ing.clone()));
            ing.clone()
        }
        None => cache.get(model, &cfg.terminal, &setpoint)?,
    };

    let disturbances = cfg.disturbance_sequence();
    let probs = model.probabilities();
    let mut kkt_cache: HashMap<(usize, usize), Arc<KktStructure>> = HashMap::new();
    let mut state = match cfg.mode {
        HorizonMode::Adaptive => HorizonState::new(cfg.n0, cfg.n_min, cfg.robust.fixed())?,
        HorizonMode::Fixed => HorizonState { n_k: cfg.n0, n_min: cfg.n0, n_max: cfg.n0 },
    };
    let mut x = cfg.x0.clone();
    let mut u_prev = cfg.u_prev0.clone();
    let mut prev: Option<(OcpProblem, PrimalDualSolution, usize)> = None;

    for k in 0..cfg.steps {
        let mut reset = false;
        if let Some((_, xp)) = cfg.pulses.iter().find(|(kp, _)| *kp == k) {
            x = xp.clone();
            reset = k > 0 && cfg.pulse_resets_horizon;
        }
        if let Some((_, sp)) = cfg.setpoints.iter().find(|(ks, _)| *ks == k) {
            if *sp != setpoint {
                setpoint = sp.clone();
                ingredients = cache.get(model, &cfg.terminal, &setpoint)?;
                reset = k > 0;
            }
        }
        if reset {
            state.n_k = state.n_max;
        }

        let n_k = state.n_k;
        let n_r = cfg.robust.at(n_k);
        let tree = Arc::new(build_tree_with_cap(n_k, n_r, model.n_realizations(), &probs, cfg.scenario_cap)?);
        let problem = assemble(model, tree, ingredients.clone(), &x, &u_prev, cfg.ocp)?;
        let kkt = kkt_cache.entry((n_k, n_r)).or_insert_with(|| Arc::new(KktStructure::new(&problem))).clone();
        let warm = prev.as_ref().map(|(pp, ps, d)| problem.shifted_warm_start(pp, ps, *d));

        let t0 = Instant::now();
        let mut cold_retry = false;
        let first = solve_with_structure(&problem, &kkt, &cfg.solver, warm.as_ref());
        let outcome = match first {
            Ok(s) => Ok(s),
            Err(e) if warm.is_some() => {
                cold_retry = true;
                let retry = solve_with_structure(&problem, &kkt, &cfg.solver, None);
                log.solver_events.push(SolverEvent { k, message: e.to_string(), recovered: retry.is_ok() });
                retry
            }
            Err(e) => Err(e),
        };
        let solve_ms = t0.elapsed().as_secs_f64() * 1e3;
        let sol = match outcome {
            Ok(s) => s,
            Err(e) => {
                if !cold_retry {
                    log.solver_events.push(SolverEvent { k, message: e.to_string(), recovered: false });
                }
                log.aborted = Some(SimError::Solver { k, source: e }.to_string());
                break;
            }
        };
        let u = problem.first_input(&sol.w);
        let v = problem.objective(&sol.w);

        let mut predictor_ms = 0.0;
        let horizon = if cfg.mode == HorizonMode::Adaptive {
            let t1 = Instant::now();
            let upd = match sensitivity_with(&problem, &sol, kkt.clone()) {
                Ok(op) => horizon_update(&state, &problem, &sol, &op, &x, &u),
                Err(e) => HorizonUpdate::fallback(&state, format!("sensitivity unavailable: {e}")),
            };
            predictor_ms = t1.elapsed().as_secs_f64() * 1e3;
            if let Some(reason) = &upd.fallback {
                log::warn!("k = {k}: horizon update fell back to N_max ({reason})");
            }
            Some(upd)
        } else {
            None
        };

        let nom = model.nominal_index;
        let base =
            CostRefs { setpoint: ingredients.refs_setpoint.clone(), x_reg: model.refs.x_reg.clone(), reg_weight: None };
        let refs = stage_refs(&base, ingredients.x_f(nom));
        let stage_cost = stage_cost_with_prev(model, &x, &u, &u_prev, &refs);
        let l_f = model.stage_cost(ingredients.x_f(nom), ingredients.u_f(nom), None, &refs);

        let d_index = disturbances[k];
        let x_next = match model.step(&x, &u, &model.realizations[d_index].d) {
            Ok(xn) => xn,
            Err(e) => {
                log.aborted = Some(format!("plant integration failed at k = {k}: {e}"));
                break;
            }
        };
        log.records.push(StepRecord {
            k,
            t: k as f64 * model.dt,
            x: x.clone(),
            u: u.clone(),
            d_index,
            n_k,
            n_r,
            n_scenarios: problem.n_scenarios(),
            solve_ms,
            predictor_ms,
            solver_iterations: sol.iterations,
            cold_retry,
            v,
            stage_cost,
            stage_cost_shifted: stage_cost - l_f,
            horizon: horizon.clone(),
        });
        if let Some(h) = &horizon {
            state.n_k = h.n_next;
        }
        x = x_next;
        log.final_state = x.clone();
        u_prev = u;
        prev = Some((problem, sol, d_index));
    }
    Ok(log)
}

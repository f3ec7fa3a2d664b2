//! Command-line front end.
//!
//! A run is described by a TOML file whose keys mirror [`RunConfig`]; absent
//! keys fall back to the builtin example setup of the chosen model and flags
//! override both. The resolved configuration is hashed (SHA-256 of its JSON
//! form) and the hash is written into every output for audit.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptive::{
    compare_runs, nominal_descent_check, run_closed_loop, ClosedLoopConfig, ClosedLoopLog, CompareSummary,
    DescentReport, DisturbanceSource, HorizonMode, LogSummary, RobustHorizon,
};
use crate::error::{SimError, TerminalError};
use crate::model::builtin::{self, CSTR_OPERATING_INPUT, CSTR_OPERATING_STATE, MODEL_NAMES};
use crate::model::SystemModel;
use crate::ocp::{OcpOptions, DEFAULT_SLACK_WEIGHT};
use crate::solver::SolverOptions;
use crate::terminal::{
    build_terminal_ingredients_with, check_terminal_region, quad_tank_reported_config, spring_mass_reported_config,
    GainMode, RegionCheck, TerminalConfig, TerminalIngredients,
};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "MSMPC_OUT_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot parse config file {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Terminal(#[from] TerminalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "msmpc", version, about = "Adaptive-horizon multi-stage NMPC experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize terminal ingredients: JSON artifact and error-bound samples.
    Terminal(TerminalArgs),
    /// Run one closed-loop simulation: log CSV and summary JSON.
    Simulate(RunArgs),
    /// Run fixed and adaptive horizons on the same scenario and compare.
    Compare(CompareArgs),
    /// Replay with the nominal realization and check the descent of V.
    DescentCheck(DescentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Tunings of the examples with self-computed (M, q) and radii.
    Example,
    /// Reported gains or radii where available (spring-mass, quad-tank).
    Reported,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fixed,
    Adaptive,
}

impl From<ModeArg> for HorizonMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fixed => HorizonMode::Fixed,
            ModeArg::Adaptive => HorizonMode::Adaptive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GainArg {
    CommonGain,
    IndependentGains,
}

impl From<GainArg> for GainMode {
    fn from(g: GainArg) -> Self {
        match g {
            GainArg::CommonGain => GainMode::CommonGain,
            GainArg::IndependentGains => GainMode::IndependentGains,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DisturbanceArg {
    Random,
    Nominal,
}

#[derive(Debug, Clone, Args)]
pub struct TerminalArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum)]
    pub mode: Option<GainArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per realization for the error-bound fit.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Tracked setpoint, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub setpoint: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "example")]
    pub preset: Preset,
    /// Also run the sampled invariance check with this many samples.
    #[arg(long)]
    pub check: Option<usize>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub n0: Option<usize>,
    #[arg(long)]
    pub n_min: Option<usize>,
    #[arg(long, conflicts_with = "fully_branched")]
    pub n_r: Option<usize>,
    #[arg(long)]
    pub fully_branched: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub disturbance: Option<DisturbanceArg>,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Run the two simulations on separate threads. Timings then compete for
    /// the same cores, so the default is sequential.
    #[arg(long)]
    pub concurrent: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DescentArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

/// (k, value) entry of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scheduled {
    pub k: usize,
    pub value: Vec<f64>,
}

/// Terminal-ingredient part of a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalSection {
    pub preset: Option<Preset>,
    /// Previously written ingredient JSON; used for the initial setpoint.
    pub artifact: Option<PathBuf>,
    pub mode: Option<GainMode>,
    pub seed: Option<u64>,
    pub n_samples: Option<usize>,
    pub box_scale: Option<f64>,
}

/// Run configuration as read from TOML; every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: Option<String>,
    pub mode: Option<HorizonMode>,
    pub n0: Option<usize>,
    pub n_min: Option<usize>,
    pub n_r: Option<usize>,
    pub fully_branched: Option<bool>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub x0: Option<Vec<f64>>,
    pub u_prev0: Option<Vec<f64>>,
    /// Setpoint at k = 0.
    pub setpoint: Option<Vec<f64>>,
    pub setpoint_changes: Option<Vec<Scheduled>>,
    pub pulses: Option<Vec<Scheduled>>,
    pub pulse_resets_horizon: Option<bool>,
    pub disturbance: Option<DisturbanceSource>,
    /// Soften the state bounds with this l1 weight; `true` in `soft_bounds`
    /// without a weight uses the default.
    pub soft_bounds: Option<bool>,
    pub slack_weight: Option<f64>,
    pub solver: Option<SolverOptions>,
    pub terminal: TerminalSection,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|source| CliError::Toml { path: path.to_path_buf(), source })
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, a: &RunArgs) {
        if let Some(m) = &a.model {
            self.model = Some(m.clone());
        }
        if let Some(m) = a.mode {
            self.mode = Some(m.into());
        }
        if let Some(v) = a.n0 {
            self.n0 = Some(v);
        }
        if let Some(v) = a.n_min {
            self.n_min = Some(v);
        }
        if let Some(v) = a.n_r {
            self.n_r = Some(v);
            self.fully_branched = Some(false);
        }
        if a.fully_branched {
            self.fully_branched = Some(true);
        }
        if let Some(v) = a.steps {
            self.steps = Some(v);
        }
        if let Some(v) = a.seed {
            self.seed = Some(v);
        }
        match a.disturbance {
            Some(DisturbanceArg::Random) => self.disturbance = Some(DisturbanceSource::Random),
            Some(DisturbanceArg::Nominal) => self.disturbance = Some(DisturbanceSource::Nominal),
            None => {}
        }
        if let Some(o) = &a.out {
            self.output_dir = Some(o.clone());
        }
    }

    /// Fills every key from the model's example setup.
    pub fn resolve(&self) -> Result<ResolvedRun, CliError> {
        let name = self.model.clone().ok_or_else(|| CliError::Config("no model given".into()))?;
        let model = model_by_name(&name)?;
        let ex = ExampleSetup::for_model(&model);
        let robust = match (self.fully_branched, self.n_r) {
            (Some(true), _) => RobustHorizon::FullyBranched,
            (_, Some(n_r)) => RobustHorizon::Stages(n_r),
            (Some(false), None) => match ex.robust {
                RobustHorizon::FullyBranched => RobustHorizon::Stages(1),
                r => r,
            },
            (None, None) => ex.robust,
        };
        let slack_weight = match (self.slack_weight, self.soft_bounds) {
            (Some(w), _) => Some(w),
            (None, Some(true)) => Some(DEFAULT_SLACK_WEIGHT),
            _ => None,
        };
        let t = &self.terminal;
        let run = ResolvedRun {
            model: model.name.clone(),
            mode: self.mode.unwrap_or(HorizonMode::Adaptive),
            n0: self.n0.unwrap_or(ex.n0),
            n_min: self.n_min.unwrap_or(ex.n_min),
            robust,
            steps: self.steps.unwrap_or(ex.steps),
            seed: self.seed.unwrap_or(0),
            x0: self.x0.clone().unwrap_or(ex.x0),
            u_prev0: self.u_prev0.clone().unwrap_or(ex.u_prev0),
            setpoint: self.setpoint.clone().unwrap_or_else(|| model.refs.setpoint.clone()),
            setpoint_changes: self.setpoint_changes.clone().unwrap_or(ex.setpoint_changes),
            pulses: self.pulses.clone().unwrap_or(ex.pulses),
            pulse_resets_horizon: self.pulse_resets_horizon.unwrap_or(false),
            disturbance: self.disturbance.clone().unwrap_or(DisturbanceSource::Random),
            slack_weight,
            solver: self.solver.clone().unwrap_or_default(),
            terminal: ResolvedTerminal {
                preset: t.preset.unwrap_or(ex.preset),
                artifact: t.artifact.clone(),
                mode: t.mode,
                seed: t.seed,
                n_samples: t.n_samples,
                box_scale: t.box_scale,
            },
        };
        Ok(run)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTerminal {
    pub preset: Preset,
    pub artifact: Option<PathBuf>,
    pub mode: Option<GainMode>,
    pub seed: Option<u64>,
    pub n_samples: Option<usize>,
    pub box_scale: Option<f64>,
}

/// Fully specified run; its JSON form is what the config hash covers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub model: String,
    pub mode: HorizonMode,
    pub n0: usize,
    pub n_min: usize,
    pub robust: RobustHorizon,
    pub steps: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub u_prev0: Vec<f64>,
    pub setpoint: Vec<f64>,
    pub setpoint_changes: Vec<Scheduled>,
    pub pulses: Vec<Scheduled>,
    pub pulse_resets_horizon: bool,
    pub disturbance: DisturbanceSource,
    pub slack_weight: Option<f64>,
    pub solver: SolverOptions,
    pub terminal: ResolvedTerminal,
}

impl ResolvedRun {
    /// SHA-256 of the JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("resolved config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Terminal configuration for the run's model and initial setpoint.
    pub fn terminal_config(&self, model: &SystemModel) -> Result<TerminalConfig, CliError> {
        let t = &self.terminal;
        let mut cfg = preset_config(model, t.preset)?;
        cfg.anchor.setpoint = self.setpoint.clone();
        if let Some(m) = t.mode {
            cfg.mode = m;
        }
        if let Some(s) = t.seed {
            cfg.seed = s;
        }
        if let Some(n) = t.n_samples {
            cfg.n_samples = n;
        }
        if let Some(b) = t.box_scale {
            cfg.box_scale = b;
        }
        Ok(cfg)
    }

    /// Builds the simulator configuration; loads the ingredient artifact when given.
    pub fn closed_loop_config(&self) -> Result<ClosedLoopConfig, CliError> {
        let model = model_by_name(&self.model)?;
        if self.setpoint.len() != model.refs.setpoint.len() {
            return Err(CliError::Config(format!(
                "setpoint has {} entries, model `{}` tracks {}",
                self.setpoint.len(),
                model.name,
                model.refs.setpoint.len()
            )));
        }
        let terminal = self.terminal_config(&model)?;
        let ingredients = match &self.terminal.artifact {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let ing = TerminalIngredients::from_json(&text)?;
                if ing.model != model.name || ing.n_realizations() != model.n_realizations() {
                    return Err(CliError::Config(format!(
                        "artifact {} is not for model `{}`",
                        path.display(),
                        model.name
                    )));
                }
                if ing.refs_setpoint != self.setpoint {
                    return Err(CliError::Config(format!(
                        "artifact {} was built for another setpoint",
                        path.display()
                    )));
                }
                Some(Arc::new(ing))
            }
            None => None,
        };
        let mut cfg = ClosedLoopConfig::new(model, terminal, self.x0.clone(), self.u_prev0.clone());
        cfg.ingredients = ingredients;
        cfg.mode = self.mode;
        cfg.n0 = self.n0;
        cfg.n_min = self.n_min;
        cfg.robust = self.robust;
        cfg.steps = self.steps;
        cfg.seed = self.seed;
        cfg.pulses = self.pulses.iter().map(|s| (s.k, s.value.clone())).collect();
        cfg.pulse_resets_horizon = self.pulse_resets_horizon;
        cfg.setpoints = self.setpoint_changes.iter().map(|s| (s.k, s.value.clone())).collect();
        cfg.disturbance = self.disturbance.clone();
        cfg.solver = self.solver.clone();
        cfg.ocp = OcpOptions { slack_weight: self.slack_weight };
        cfg.config_hash = self.hash();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_by_name(name: &str) -> Result<SystemModel, CliError> {
    builtin::by_name(name)
        .ok_or_else(|| CliError::Config(format!("unknown model `{name}`; known: {}", MODEL_NAMES.join(", "))))
}

fn preset_config(model: &SystemModel, preset: Preset) -> Result<TerminalConfig, CliError> {
    let cfg = match (preset, model.name.as_str()) {
        (Preset::Reported, "spring_mass") => Some(spring_mass_reported_config(model)),
        (Preset::Reported, "quad_tank") => Some(quad_tank_reported_config(model)),
        _ => TerminalConfig::example(model),
    };
    cfg.ok_or_else(|| CliError::Config(format!("no terminal tuning for model `{}`", model.name)))
}

/// The closed-loop setups of the builtin examples.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleSetup {
    pub n0: usize,
    pub n_min: usize,
    pub robust: RobustHorizon,
    pub steps: usize,
    pub x0: Vec<f64>,
    pub u_prev0: Vec<f64>,
    pub setpoint_changes: Vec<Scheduled>,
    pub pulses: Vec<Scheduled>,
    pub preset: Preset,
}

/// Quad-tank state pulses at k = 0, 50, 100.
pub const QUAD_TANK_PULSES: [(usize, [f64; 4]); 3] =
    [(0, [28.0, 28.0, 14.2, 21.3]), (50, [28.0, 14.0, 28.0, 21.3]), (100, [28.0, 14.0, 14.2, 21.3])];

/// Pump flows that hold the quad-tank at its nominal equilibrium.
pub const QUAD_TANK_U0: [f64; 2] = [43.09, 35.63];

impl ExampleSetup {
    pub fn for_model(model: &SystemModel) -> Self {
        match model.name.as_str() {
            "spring_mass" => Self {
                n0: 8,
                n_min: 2,
                robust: RobustHorizon::FullyBranched,
                steps: 60,
                x0: vec![-4.0, 4.0],
                u_prev0: vec![0.0],
                setpoint_changes: vec![],
                pulses: vec![],
                preset: Preset::Reported,
            },
            "cstr" => Self {
                n0: 40,
                n_min: 5,
                robust: RobustHorizon::Stages(1),
                // 0.6 h at 18 s, setpoint 0.5 -> 0.7 at 0.3 h.
                steps: 120,
                x0: CSTR_OPERATING_STATE.to_vec(),
                u_prev0: CSTR_OPERATING_INPUT.to_vec(),
                setpoint_changes: vec![Scheduled { k: 60, value: vec![0.7] }],
                pulses: vec![],
                preset: Preset::Example,
            },
            "quad_tank" => Self {
                n0: 30,
                n_min: 5,
                robust: RobustHorizon::Stages(1),
                steps: 150,
                x0: QUAD_TANK_PULSES[0].1.to_vec(),
                u_prev0: QUAD_TANK_U0.to_vec(),
                setpoint_changes: vec![],
                pulses: QUAD_TANK_PULSES.iter().map(|(k, x)| Scheduled { k: *k, value: x.to_vec() }).collect(),
                preset: Preset::Reported,
            },
            _ => Self {
                n0: 5,
                n_min: 2,
                robust: RobustHorizon::Stages(1),
                steps: 20,
                x0: vec![1.0; model.n_x],
                u_prev0: vec![0.0; model.n_u],
                setpoint_changes: vec![],
                pulses: vec![],
                preset: Preset::Example,
            },
        }
    }
}

/// Files written and a one-paragraph report of a command.
#[derive(Clone, Debug, Default)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub report: String,
    /// False when the command ran but its check failed or the run aborted.
    pub success: bool,
}

pub fn execute(cli: &Cli) -> Result<CommandOutput, CliError> {
    match &cli.command {
        Command::Terminal(a) => cmd_terminal(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::DescentCheck(a) => cmd_descent_check(a),
    }
}

fn out_dir(path: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Serialize)]
struct TerminalRecord<'a> {
    config_hash: String,
    ingredients: &'a TerminalIngredients,
    region_check: Option<Vec<RegionCheck>>,
}

/// One row per realization: label, M, q, sigma_bar, c_f.
pub fn radii_table(ing: &TerminalIngredients) -> String {
    let mut s = format!("{:<16} {:>10} {:>8} {:>10} {:>10}\n", "realization", "M", "q", "sigma_bar", "c_f");
    for p in &ing.per {
        s.push_str(&format!(
            "{:<16} {:>10.4} {:>8.4} {:>10.4} {:>10.4}\n",
            p.label, p.fit.m, p.fit.q, p.radius.sigma_bar, p.radius.c_f
        ));
    }
    if let Some(c) = ing.common_radius {
        s.push_str(&format!("common radius {c:.4}\n"));
    }
    s
}

pub fn cmd_terminal(a: &TerminalArgs) -> Result<CommandOutput, CliError> {
    let model = model_by_name(&a.model)?;
    let mut cfg = preset_config(&model, a.preset)?;
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.samples {
        cfg.n_samples = n;
    }
    if let Some(sp) = &a.setpoint {
        if sp.len() != model.refs.setpoint.len() {
            return Err(CliError::Config(format!(
                "model `{}` tracks {} setpoint(s)",
                model.name,
                model.refs.setpoint.len()
            )));
        }
        cfg.anchor.setpoint = sp.clone();
    }
    let ing = build_terminal_ingredients_with(&model, &cfg)?;
    let check = match a.check {
        Some(n) => Some(check_terminal_region(&model, &ing, n, cfg.seed)?),
        None => None,
    };
    let hash = hex(&Sha256::digest(format!("{:?}|{:?}", a, cfg).as_bytes()));
    let dir = out_dir(&a.out)?;
    let json = dir.join(format!("{}_terminal.json", model.name));
    let samples = dir.join(format!("{}_samples.csv", model.name));
    write_json(&json, &TerminalRecord { config_hash: hash, ingredients: &ing, region_check: check.clone() })?;
    ing.write_samples_csv(&samples).map_err(io_err(&samples))?;
    let mut report = radii_table(&ing);
    let mut success = true;
    if let Some(chk) = &check {
        for c in chk {
            report.push_str(&format!(
                "check r{}: {} violations of {} samples\n",
                c.realization,
                c.violations(),
                c.n_samples
            ));
            success &= c.violations() == 0;
        }
    }
    Ok(CommandOutput { files: vec![json, samples], report, success })
}

fn load_run(a: &RunArgs) -> Result<(ResolvedRun, PathBuf), CliError> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    rc.apply(a);
    let dir = rc.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((rc.resolve()?, dir))
}

fn mode_name(m: HorizonMode) -> &'static str {
    match m {
        HorizonMode::Fixed => "fixed",
        HorizonMode::Adaptive => "adaptive",
    }
}

fn write_log(dir: &Path, stem: &str, log: &ClosedLoopLog) -> Result<Vec<PathBuf>, CliError> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}_summary.json"));
    log.write_csv_file(&csv)?;
    write_json(&json, &log.summary())?;
    Ok(vec![csv, json])
}

fn describe(s: &LogSummary) -> String {
    let tail: Vec<usize> = s.horizons.iter().rev().take(5).rev().copied().collect();
    format!(
        "{} {}: {} steps, solve {:.0} ms, predictor {:.0} ms, cost {:.6}, final horizons {:?}, events {}{}",
        s.model,
        mode_name(s.mode),
        s.steps,
        s.total_solve_ms,
        s.total_predictor_ms,
        s.cumulative_stage_cost,
        tail,
        s.infeasibility_events,
        s.aborted.as_ref().map(|a| format!(", aborted: {a}")).unwrap_or_default()
    )
}

pub fn cmd_simulate(a: &RunArgs) -> Result<CommandOutput, CliError> {
    let (run, dir) = load_run(a)?;
    let cfg = run.closed_loop_config()?;
    let log = run_closed_loop(&cfg)?;
    let dir = out_dir(&dir)?;
    let files = write_log(&dir, &format!("{}_{}", run.model, mode_name(run.mode)), &log)?;
    Ok(CommandOutput { files, report: describe(&log.summary()), success: log.aborted.is_none() })
}

#[derive(Serialize)]
struct CompareRecord {
    config_hash: String,
    summary: CompareSummary,
    fixed: LogSummary,
    adaptive: LogSummary,
}

pub fn cmd_compare(a: &CompareArgs) -> Result<CommandOutput, CliError> {
    let (run, dir) = load_run(&a.run)?;
    let mut fixed = run.clone();
    fixed.mode = HorizonMode::Fixed;
    let mut adaptive = run.clone();
    adaptive.mode = HorizonMode::Adaptive;
    let (cf, ca) = (fixed.closed_loop_config()?, adaptive.closed_loop_config()?);
    let (lf, la) = if a.concurrent {
        std::thread::scope(|s| {
            let hf = s.spawn(|| run_closed_loop(&cf));
            let la = run_closed_loop(&ca);
            (hf.join().expect("fixed-horizon run panicked"), la)
        })
    } else {
        (run_closed_loop(&cf), run_closed_loop(&ca))
    };
    let (lf, la) = (lf?, la?);
    let dir = out_dir(&dir)?;
    let mut files = write_log(&dir, &format!("{}_fixed", run.model), &lf)?;
    files.extend(write_log(&dir, &format!("{}_adaptive", run.model), &la)?);
    let success = lf.aborted.is_none() && la.aborted.is_none();
    let summary = compare_runs(&lf, &la)?;
    let json = dir.join(format!("{}_compare.json", run.model));
    let record = CompareRecord {
        config_hash: run.hash(),
        summary: summary.clone(),
        fixed: lf.summary(),
        adaptive: la.summary(),
    };
    write_json(&json, &record)?;
    files.push(json);
    let report = format!(
        "{}\n{}\ncost ratio {:.4}, max state deviation {:.4}, solver time saving {:.1}% ({:.1}% with predictor)",
        describe(&record.fixed),
        describe(&record.adaptive),
        summary.cost_ratio,
        summary.max_state_dev,
        summary.time_saving_pct,
        summary.time_saving_incl_predictor_pct
    );
    Ok(CommandOutput { files, report, success })
}

#[derive(Serialize)]
struct DescentRecord<'a> {
    config_hash: String,
    report: &'a DescentReport,
}

pub fn cmd_descent_check(a: &DescentArgs) -> Result<CommandOutput, CliError> {
    let (mut run, dir) = load_run(&a.run)?;
    run.disturbance = DisturbanceSource::Nominal;
    let cfg = run.closed_loop_config()?;
    let log = run_closed_loop(&cfg)?;
    let rep = nominal_descent_check(&log, a.tol);
    let dir = out_dir(&dir)?;
    let mut files = write_log(&dir, &format!("{}_nominal", run.model), &log)?;
    let json = dir.join(format!("{}_descent.json", run.model));
    write_json(&json, &DescentRecord { config_hash: run.hash(), report: &rep })?;
    files.push(json);
    let mut report = format!("{} steps checked, {} violations (tol {:e})", rep.checked, rep.violations.len(), rep.tol);
    for v in rep.violations.iter().take(10) {
        report.push_str(&format!(
            "\n  k = {}: V_k = {:.6e}, V_k+1 = {:.6e}, l_k = {:.6e}, excess {:.3e}",
            v.k, v.v_k, v.v_next, v.stage_cost, v.excess
        ));
    }
    Ok(CommandOutput { files, report, success: rep.passed() && log.aborted.is_none() })
}

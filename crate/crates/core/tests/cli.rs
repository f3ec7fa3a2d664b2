//! Command-line configuration, outputs and run determinism.

use std::fs;
use std::path::PathBuf;

use clap::Parser;
use msmpc::adaptive::{run_closed_loop, HorizonMode, RobustHorizon};
use msmpc::cli::{execute, Cli, CliError, RunConfig};

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("msmpc-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(RunConfig::from_toml_str("model = \"cstr\"\nhorizon = 4\n").is_err());
    assert!(RunConfig::from_toml_str("[terminal]\nradius = 1.0\n").is_err());
    assert!(RunConfig::from_toml_str("[solver]\ntolerance = 1e-6\n").is_err());
}

#[test]
fn toml_overrides_example_setup() {
    let rc = RunConfig::from_toml_str(
        r#"
        model = "cstr"
        mode = "fixed"
        n0 = 12
        n_r = 2
        steps = 7
        seed = 3
        [[setpoint_changes]]
        k = 4
        value = [0.6]
        [terminal]
        preset = "example"
        n_samples = 500
        "#,
    )
    .unwrap();
    let run = rc.resolve().unwrap();
    assert_eq!(run.mode, HorizonMode::Fixed);
    assert_eq!((run.n0, run.n_min, run.steps, run.seed), (12, 5, 7, 3));
    assert_eq!(run.robust, RobustHorizon::Stages(2));
    assert_eq!(run.setpoint_changes.len(), 1);
    assert_eq!(run.terminal.n_samples, Some(500));
}

#[test]
fn example_defaults_per_model() {
    let spring = RunConfig { model: Some("spring_mass".into()), ..Default::default() }.resolve().unwrap();
    assert_eq!((spring.n0, spring.n_min, spring.steps), (8, 2, 60));
    assert_eq!(spring.robust, RobustHorizon::FullyBranched);
    assert_eq!(spring.x0, vec![-4.0, 4.0]);
    let qt = RunConfig { model: Some("quad_tank".into()), ..Default::default() }.resolve().unwrap();
    assert_eq!(qt.pulses.len(), 3);
    assert!(RunConfig::default().resolve().is_err());
    assert!(matches!(
        RunConfig { model: Some("pendulum".into()), ..Default::default() }.resolve(),
        Err(CliError::Config(_))
    ));
}

#[test]
fn hash_tracks_the_resolved_configuration() {
    let base = RunConfig { model: Some("double_integrator".into()), ..Default::default() };
    let a = base.resolve().unwrap();
    assert_eq!(a.hash(), base.resolve().unwrap().hash());
    assert_eq!(a.hash().len(), 64);
    let b = RunConfig { seed: Some(9), ..base }.resolve().unwrap();
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn flags_override_file_values() {
    let dir = scratch_dir("flags");
    let path = dir.join("run.toml");
    fs::write(&path, "model = \"double_integrator\"\nsteps = 3\nn0 = 4\n").unwrap();
    let out = dir.join("out");
    let cli = Cli::try_parse_from([
        "msmpc",
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--steps",
        "5",
        "--mode",
        "fixed",
        "--out",
        out.to_str().unwrap(),
    ])
    .unwrap();
    let res = execute(&cli).unwrap();
    assert!(res.success, "{}", res.report);
    let csv = fs::read_to_string(out.join("double_integrator_fixed.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("double_integrator_fixed_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["horizons"], serde_json::json!([4, 4, 4, 4, 4]));
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn bad_config_file_is_an_error() {
    let dir = scratch_dir("bad");
    let path = dir.join("run.toml");
    fs::write(&path, "model = \"double_integrator\"\nsteps = \"many\"\n").unwrap();
    let cli = Cli::try_parse_from(["msmpc", "simulate", "--config", path.to_str().unwrap()]).unwrap();
    assert!(matches!(execute(&cli), Err(CliError::Toml { .. })));
    assert!(Cli::try_parse_from(["msmpc", "simulate", "--n-r", "2", "--fully-branched"]).is_err());
}

#[test]
fn runs_are_deterministic_apart_from_timing() {
    let rc = RunConfig { model: Some("double_integrator".into()), steps: Some(6), ..Default::default() };
    let cfg = rc.resolve().unwrap().closed_loop_config().unwrap();
    let a = run_closed_loop(&cfg).unwrap();
    let b = run_closed_loop(&cfg).unwrap();
    assert_eq!(a.csv_without_timing(), b.csv_without_timing());
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn fixed_mode_keeps_the_horizon() {
    let rc = RunConfig {
        model: Some("spring_mass".into()),
        mode: Some(HorizonMode::Fixed),
        fully_branched: Some(false),
        n_r: Some(1),
        steps: Some(5),
        ..Default::default()
    };
    let log = run_closed_loop(&rc.resolve().unwrap().closed_loop_config().unwrap()).unwrap();
    assert!(log.horizons().iter().all(|&n| n == 8), "{:?}", log.horizons());
}

#[test]
fn terminal_command_writes_artifact_that_runs_load() {
    let dir = scratch_dir("terminal");
    let cli = Cli::try_parse_from([
        "msmpc",
        "terminal",
        "--model",
        "double_integrator",
        "--samples",
        "200",
        "--check",
        "100",
        "--out",
        dir.to_str().unwrap(),
    ])
    .unwrap();
    let res = execute(&cli).unwrap();
    assert!(res.report.contains("b=0.8"));
    let artifact = dir.join("double_integrator_terminal.json");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(&artifact).unwrap()).unwrap();
    let ing = serde_json::to_string(&record["ingredients"]).unwrap();
    let ing_path = dir.join("ingredients.json");
    fs::write(&ing_path, ing).unwrap();
    assert!(dir.join("double_integrator_samples.csv").exists());

    let mut rc = RunConfig { model: Some("double_integrator".into()), steps: Some(3), ..Default::default() };
    rc.terminal.artifact = Some(ing_path);
    let log = run_closed_loop(&rc.resolve().unwrap().closed_loop_config().unwrap()).unwrap();
    assert_eq!(log.records.len(), 3);

    rc.model = Some("spring_mass".into());
    assert!(rc.resolve().unwrap().closed_loop_config().is_err());
}

#[test]
fn compare_and_descent_commands_write_reports() {
    let dir = scratch_dir("compare");
    let out = dir.to_str().unwrap();
    let cli = Cli::try_parse_from(["msmpc", "compare", "--model", "double_integrator", "--steps", "4", "--out", out])
        .unwrap();
    let res = execute(&cli).unwrap();
    assert!(res.success);
    let cmp: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("double_integrator_compare.json")).unwrap()).unwrap();
    assert!(cmp["summary"]["cost_ratio"].as_f64().unwrap() > 0.0);

    let cli =
        Cli::try_parse_from(["msmpc", "descent-check", "--model", "double_integrator", "--steps", "4", "--out", out])
            .unwrap();
    let res = execute(&cli).unwrap();
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("double_integrator_descent.json")).unwrap()).unwrap();
    assert_eq!(rep["report"]["nominal"], serde_json::json!(true));
    assert_eq!(rep["report"]["checked"], serde_json::json!(3));
    assert_eq!(res.success, rep["report"]["violations"].as_array().unwrap().is_empty());
}

#[test]
fn shipped_configs_match_example_setups() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, n_r) in [("spring_mass.toml", None), ("cstr.toml", Some(1)), ("quad_tank.toml", Some(2))] {
        let rc = RunConfig::from_file(&dir.join(file)).unwrap();
        let run = rc.resolve().unwrap();
        let example = RunConfig { model: rc.model.clone(), n_r, ..Default::default() }.resolve().unwrap();
        assert_eq!(run.x0, example.x0, "{file}");
        assert_eq!(run.pulses, example.pulses, "{file}");
        assert_eq!(run.setpoint_changes, example.setpoint_changes, "{file}");
        assert_eq!(
            (run.n0, run.n_min, run.steps, run.robust),
            (example.n0, example.n_min, example.steps, example.robust)
        );
        run.closed_loop_config().unwrap();
    }
}

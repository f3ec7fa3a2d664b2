//! Closed-loop simulator behavior on short runs.

use msmpc::adaptive::{
    compare_runs, nominal_descent_check, run_closed_loop, ClosedLoopConfig, DisturbanceSource, HorizonMode,
    RobustHorizon,
};
use msmpc::model::builtin;
use msmpc::terminal::{spring_mass_reported_config, TerminalConfig};

fn di_config(steps: usize) -> ClosedLoopConfig {
    let model = builtin::double_integrator();
    let terminal = TerminalConfig::example(&model).unwrap();
    let mut cfg = ClosedLoopConfig::new(model, terminal, vec![2.0, -1.0], vec![0.0]);
    cfg.n0 = 6;
    cfg.n_min = 2;
    cfg.steps = steps;
    cfg
}

#[test]
fn horizon_stays_in_admissible_range() {
    let log = run_closed_loop(&di_config(10)).unwrap();
    assert_eq!(log.records.len(), 10);
    assert_eq!(log.records[0].n_k, 6);
    for r in &log.records {
        assert!((2..=6).contains(&r.n_k), "{:?}", log.horizons());
        assert_eq!(r.n_r, 1);
        if let Some(h) = &r.horizon {
            assert_eq!(h.successor_n_t.len(), 2);
        }
    }
    // The model is linear and the radius unbounded, so every prediction enters
    // its terminal set at the first stage: N_T = 1 and N = N_T + N_min.
    assert_eq!(*log.horizons().last().unwrap(), 3);
}

#[test]
fn scripted_disturbances_are_applied_in_order() {
    let mut cfg = di_config(5);
    cfg.disturbance = DisturbanceSource::Scripted(vec![1, 0]);
    let log = run_closed_loop(&cfg).unwrap();
    let d: Vec<usize> = log.records.iter().map(|r| r.d_index).collect();
    assert_eq!(d, vec![1, 0, 1, 0, 1]);
    // The plant follows x+ = f(x, u, d_k).
    let m = &cfg.model;
    for w in log.records.windows(2) {
        let next = m.step(&w[0].x, &w[0].u, &m.realizations[w[0].d_index].d).unwrap();
        for (a, b) in next.iter().zip(&w[1].x) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pulses_overwrite_the_state() {
    let mut cfg = di_config(6);
    cfg.pulses = vec![(3, vec![-1.5, 0.5])];
    let log = run_closed_loop(&cfg).unwrap();
    assert_eq!(log.records[3].x, vec![-1.5, 0.5]);
    cfg.pulse_resets_horizon = true;
    let log = run_closed_loop(&cfg).unwrap();
    assert_eq!(log.records[3].n_k, 6);
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut cfg = di_config(3);
    cfg.n_min = 7;
    assert!(run_closed_loop(&cfg).is_err());
    let mut cfg = di_config(3);
    cfg.x0 = vec![0.0];
    assert!(run_closed_loop(&cfg).is_err());
    let mut cfg = di_config(3);
    cfg.disturbance = DisturbanceSource::Scripted(vec![5]);
    assert!(run_closed_loop(&cfg).is_err());
}

#[test]
fn comparison_requires_matching_runs() {
    let mut fixed = di_config(5);
    fixed.mode = HorizonMode::Fixed;
    let adaptive = di_config(5);
    let (a, b) = (run_closed_loop(&fixed).unwrap(), run_closed_loop(&adaptive).unwrap());
    assert!(a.horizons().iter().all(|&n| n == 6));
    let s = compare_runs(&a, &b).unwrap();
    assert_eq!(s.steps, 5);
    assert!(s.cost_ratio > 0.0);
    let mut other = di_config(5);
    other.seed = 99;
    assert!(compare_runs(&a, &run_closed_loop(&other).unwrap()).is_err());
    assert!(compare_runs(&a, &run_closed_loop(&di_config(4)).unwrap()).is_err());
}

#[test]
fn spring_mass_nominal_replay_descends() {
    let model = builtin::spring_damper_mass();
    let terminal = spring_mass_reported_config(&model);
    let mut cfg = ClosedLoopConfig::new(model, terminal, vec![-2.0, 1.0], vec![0.0]);
    cfg.n0 = 5;
    cfg.n_min = 2;
    cfg.robust = RobustHorizon::Stages(1);
    cfg.steps = 10;
    cfg.disturbance = DisturbanceSource::Nominal;
    let log = run_closed_loop(&cfg).unwrap();
    let rep = nominal_descent_check(&log, 1e-6);
    assert!(rep.nominal);
    assert_eq!(rep.checked, 9);
    assert!(rep.passed(), "{:?}", rep.violations);
}

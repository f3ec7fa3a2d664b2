//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits with
//! status 1 when any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use msmpc::adaptive::{compare_runs, nominal_descent_check, run_closed_loop, DisturbanceSource, HorizonMode};
use msmpc::cli::RunConfig;
use msmpc::linalg;
use msmpc::model::builtin::{self, MODEL_NAMES};
use msmpc::model::SystemModel;
use msmpc::ocp::{assemble, OcpOptions, OcpProblem};
use msmpc::scenario::build_tree;
use msmpc::solver::{self, predict, sensitivity, SolverOptions};
use msmpc::terminal::{
    build_terminal_ingredients_with, check_terminal_region, fit_error_bound, quad_tank_reported_config,
    spring_mass_reported_config, terminal_radius, GainMode, TerminalConfig, TerminalIngredients,
    SPRING_MASS_REPORTED_FIT, SPRING_MASS_REPORTED_GAIN, SPRING_MASS_REPORTED_RADII,
};

/// Reported CSTR (M_r, c_f^r) for E3 in {8774, 8560, 8346}, q = 2, at c_B^set = 0.5 and 0.7.
const CSTR_TABLE: [(f64, [(f64, f64); 3]); 2] =
    [(0.5, [(0.62, 0.1429), (0.75, 0.1159), (1.12, 0.0747)]), (0.7, [(0.50, 0.1718), (0.62, 0.1337), (0.90, 0.0846)])];

/// Reported quad-tank (M_r, c_f^r), q = 2, in realization order (gamma_1 outer,
/// gamma_2 inner, each over {0.35, 0.40, 0.45}).
const QUAD_TANK_TABLE: [(f64, f64); 9] = [
    (0.0059, 30.97),
    (0.0057, 31.57),
    (0.0142, 12.12),
    (0.0068, 26.63),
    (0.0056, 31.77),
    (0.0088, 19.99),
    (0.0074, 23.69),
    (0.0065, 27.04),
    (0.0058, 30.43),
];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Result<Outcome, String>) -> bool {
    let t0 = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let secs = t0.elapsed().as_secs_f64();
    let tag = if out.pass { "PASS" } else { "FAIL" };
    println!("{tag} {id:>2} {title} [{secs:.1} s] {}", out.detail);
    out.pass
}

fn ratio_list(v: &[f64]) -> String {
    v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
}

fn ingredients(model: &SystemModel, cfg: &TerminalConfig) -> Result<TerminalIngredients, String> {
    build_terminal_ingredients_with(model, cfg).map_err(|e| e.to_string())
}

/// Example tuning with a fixed (M, q), which skips the sampled fit.
fn unsampled_config(model: &SystemModel) -> TerminalConfig {
    let mut cfg = TerminalConfig::example(model).expect("builtin example");
    cfg.fit_override = Some((1.0, 2.0));
    cfg
}

fn c1_combinatorics() -> Result<Outcome, String> {
    let t0 = Instant::now();
    let p = [1.0 / 3.0; 3];
    let a = build_tree(2, 2, 3, &p).map_err(|e| e.to_string())?.n_scenarios();
    let b = build_tree(8, 8, 3, &p).map_err(|e| e.to_string())?.n_scenarios();
    let secs = t0.elapsed().as_secs_f64();
    Ok(Outcome::new(a == 9 && b == 6561 && secs < 1.0, format!("card = {a} (N_R = 2), {b} (N_R = 8), {secs:.3} s")))
}

fn c2_spring_radii() -> Result<Outcome, String> {
    let model = builtin::spring_damper_mass();
    let ing = ingredients(&model, &spring_mass_reported_config(&model))?;
    let k = DMatrix::from_row_slice(1, 2, &SPRING_MASS_REPORTED_GAIN);
    let (m, q) = SPRING_MASS_REPORTED_FIT;
    let radii = |eps_rel: f64| -> Result<Vec<(f64, f64)>, String> {
        ing.per
            .iter()
            .map(|p| {
                let a_k = &p.a - &p.b * &k;
                let lmin = linalg::sym_eig_range(&(&ing.q_weight + k.transpose() * &ing.r_weight * &k)).0;
                terminal_radius(m, q, &a_k, &ing.q_weight, &ing.r_weight, &k, Some(eps_rel * lmin))
                    .map(|r| (r.c_f, r.sigma_bar))
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let base = radii(1e-6)?;
    let ratios: Vec<f64> = base.iter().zip(SPRING_MASS_REPORTED_RADII).map(|(c, t)| c.0 / t).collect();
    let pass = ratios.iter().all(|r| (r - 1.0).abs() <= 0.05);
    let spread: f64 = [0.0, 1e-3]
        .iter()
        .map(|&e| radii(e))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .flat_map(|v| v.iter().zip(&base).map(|(a, b)| (a.0 / b.0 - 1.0).abs()))
        .fold(0.0, f64::max);
    let sig: Vec<f64> = base.iter().map(|c| c.1).collect();
    Ok(Outcome::new(
        pass,
        format!(
            "c_f/reported = [{}], sigma_bar = [{}], eps_LQ in {{0, 1e-6, 1e-3}} lambda_min(W) changes c_f by <= {spread:.1e}",
            ratio_list(&ratios),
            ratio_list(&sig)
        ),
    ))
}

fn c3_spring_fit() -> Result<Outcome, String> {
    let model = builtin::spring_damper_mass();
    let cfg = spring_mass_reported_config(&model);
    let ing = ingredients(&model, &cfg)?;
    let k = DMatrix::from_row_slice(1, 2, &SPRING_MASS_REPORTED_GAIN);
    let pair = &ing.per[model.nominal_index].pair;
    let t0 = Instant::now();
    let fit = fit_error_bound(&model, pair, &k, 100_000, cfg.seed, cfg.box_scale).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let holds = fit.samples.iter().filter(|&&(x, p)| p <= fit.m * x.powf(fit.q) * (1.0 + 1e-12)).count();
    let (m_rep, _) = SPRING_MASS_REPORTED_FIT;
    let q_ok = (2.05..=2.35).contains(&fit.q);
    let m_ok = (fit.m / m_rep - 1.0).abs() <= 0.15;
    let all = holds == fit.n_retained;
    Ok(Outcome::new(
        q_ok && m_ok && all && secs < 30.0,
        format!(
            "q = {:.4}, M = {:.4} (M/reported = {:.3}), bound holds on {holds}/{} retained samples",
            fit.q,
            fit.m,
            fit.m / m_rep,
            fit.n_retained
        ),
    ))
}

fn c4_benchmark_radii() -> Result<Outcome, String> {
    let mut pass = true;
    let mut detail = String::new();
    let cstr = builtin::cstr();
    for (setpoint, rows) in CSTR_TABLE {
        let mut cfg = unsampled_config(&cstr);
        cfg.anchor.setpoint = vec![setpoint];
        let ing = ingredients(&cstr, &cfg)?;
        let mut ratios = Vec::new();
        for (p, (m, c_rep)) in ing.per.iter().zip(rows) {
            let a_k = &p.a - &p.b * &p.k;
            let r = terminal_radius(
                m,
                2.0,
                &a_k,
                &ing.q_weight,
                &ing.r_weight,
                &p.k,
                Some(cfg.eps_lq_rel * linalg::sym_eig_range(&p.w).0),
            )
            .map_err(|e| e.to_string())?;
            ratios.push(r.c_f / c_rep);
        }
        pass &= ratios.iter().all(|r| (r - 1.0).abs() <= 0.15);
        detail.push_str(&format!("CSTR c_B = {setpoint}: [{}]; ", ratio_list(&ratios)));
    }
    let qt = builtin::quad_tank();
    let cfg = unsampled_config(&qt);
    let ing = ingredients(&qt, &cfg)?;
    let mut ratios = Vec::new();
    for (p, (m, c_rep)) in ing.per.iter().zip(QUAD_TANK_TABLE) {
        let a_k = &p.a - &p.b * &p.k;
        let r = terminal_radius(
            m,
            2.0,
            &a_k,
            &ing.q_weight,
            &ing.r_weight,
            &p.k,
            Some(cfg.eps_lq_rel * linalg::sym_eig_range(&p.w).0),
        )
        .map_err(|e| e.to_string())?;
        ratios.push(r.c_f / c_rep);
    }
    pass &= ratios.iter().all(|r| (r - 1.0).abs() <= 0.25);
    detail.push_str(&format!("quad-tank: [{}] (c_f/reported)", ratio_list(&ratios)));
    Ok(Outcome::new(pass, detail))
}

fn c5_riccati_lyapunov() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for name in MODEL_NAMES {
        let model = builtin::by_name(name).expect("builtin");
        let mut configs = vec![unsampled_config(&model)];
        if name == "spring_mass" {
            configs.push(spring_mass_reported_config(&model));
        }
        let mut model_worst: f64 = 0.0;
        for cfg in configs {
            let ing = ingredients(&model, &cfg)?;
            for p in &ing.per {
                let a_k = &p.a - &p.b * &p.k;
                let lyap = linalg::lyapunov_residual(&a_k, &p.w, &p.p);
                let res = match ing.mode {
                    GainMode::IndependentGains => {
                        linalg::dare_residual(&p.a, &p.b, &ing.q_weight, &ing.r_weight, &p.p).max(lyap)
                    }
                    GainMode::CommonGain => lyap,
                };
                model_worst = model_worst.max(res);
            }
            if ing.mode == GainMode::CommonGain && cfg.gain_override.is_none() {
                let nom = &ing.per[model.nominal_index];
                let (p, _) = msmpc::terminal::solve_riccati(&nom.a, &nom.b, &ing.q_weight, &ing.r_weight)
                    .map_err(|e| e.to_string())?;
                model_worst = model_worst.max(linalg::dare_residual(&nom.a, &nom.b, &ing.q_weight, &ing.r_weight, &p));
            }
        }
        detail.push_str(&format!("{name} {model_worst:.1e}; "));
        worst = worst.max(model_worst);
    }
    let (a, w) = (0.9, 2.0);
    let exact = w / (1.0 - a * a);
    let p = msmpc::terminal::solve_lyapunov(&DMatrix::from_element(1, 1, a), &DMatrix::from_element(1, 1, w))
        .map_err(|e| e.to_string())?;
    let scalar_err = (p[(0, 0)] - exact).abs();
    detail.push_str(&format!("scalar closed form error {scalar_err:.1e}"));
    Ok(Outcome::new(worst < 1e-9 && scalar_err <= 1e-12, format!("max residual {worst:.1e} ({detail})")))
}

fn spring_problem(n: usize, n_r: usize, x: &[f64]) -> Result<OcpProblem, String> {
    let model = builtin::spring_damper_mass();
    let ing = Arc::new(ingredients(&model, &spring_mass_reported_config(&model))?);
    let tree = Arc::new(build_tree(n, n_r, model.n_realizations(), &model.probabilities()).map_err(|e| e.to_string())?);
    assemble(&model, tree, ing, x, &[0.0], OcpOptions::default()).map_err(|e| e.to_string())
}

fn c6_predictor_order() -> Result<Outcome, String> {
    let t0 = Instant::now();
    let p = spring_problem(8, 2, &[-1.0, 1.0])?;
    let opts = SolverOptions { tol: 1e-11, ..SolverOptions::default() };
    let sol = solver::solve(&p, &opts, None).map_err(|e| e.to_string())?;
    let op = sensitivity(&p, &sol).map_err(|e| e.to_string())?;
    let dir = [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()];
    let mut errors = Vec::new();
    for delta in [1e-2, 5e-3, 2.5e-3] {
        let x: Vec<f64> = p.x_k.iter().zip(dir).map(|(x, d)| x + delta * d).collect();
        let approx = predict(&op, &sol, &x);
        let exact = solver::solve(&p.with_initial_state(&x), &opts, None).map_err(|e| e.to_string())?;
        let err = approx.iter().zip(&exact.w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        errors.push(err);
    }
    let orders: Vec<f64> = errors.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = orders.iter().all(|&o| o >= 1.8) && secs < 60.0;
    Ok(Outcome::new(
        pass,
        format!(
            "errors [{}], orders [{}]",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", "),
            ratio_list(&orders)
        ),
    ))
}

/// Dense equality-constrained QP of the fully branched two-stage double
/// integrator, written from the model matrices, solved through its KKT system.
fn c7_brute_force() -> Result<Outcome, String> {
    let model = builtin::double_integrator();
    let ing = Arc::new(ingredients(&model, &TerminalConfig::example(&model).expect("builtin"))?);
    let x_k = [1.0, -0.5];
    let tree = Arc::new(build_tree(2, 2, 2, &model.probabilities()).map_err(|e| e.to_string())?);
    let p =
        assemble(&model, tree.clone(), ing.clone(), &x_k, &[0.0], OcpOptions::default()).map_err(|e| e.to_string())?;
    let opts = SolverOptions { tol: 1e-10, ..SolverOptions::default() };
    let sol = solver::solve(&p, &opts, None).map_err(|e| e.to_string())?;

    let dt = model.dt;
    let (q, r) = ([1.0, 1.0], 0.1);
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]);
    let b = |g: f64| DMatrix::from_row_slice(2, 1, &[g * dt * dt / 2.0, g * dt]);
    // Per scenario: x0, x1, x2 (2 each), u0, u1.
    let (nc, blk) = (tree.n_scenarios(), 8);
    let nv = nc * blk;
    let xi = |c: usize, i: usize| c * blk + 2 * i;
    let ui = |c: usize, i: usize| c * blk + 6 + i;
    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut row = |coefs: &[(usize, f64)], rhs: f64| {
        let mut v = DVector::zeros(nv);
        for &(j, c) in coefs {
            v[j] += c;
        }
        rows.push((v, rhs));
    };
    for c in 0..nc {
        let w = tree.weights[c];
        let seq = &tree.sequences[c];
        for i in 0..2 {
            for s in 0..2 {
                h[(xi(c, i) + s, xi(c, i) + s)] += 2.0 * w * q[s];
            }
            h[(ui(c, i), ui(c, i))] += 2.0 * w * r;
        }
        let pt = &ing.per[seq[1]].p;
        for s in 0..2 {
            for t in 0..2 {
                h[(xi(c, 2) + s, xi(c, 2) + t)] += 2.0 * w * pt[(s, t)];
            }
        }
        for s in 0..2 {
            row(&[(xi(c, 0) + s, 1.0)], x_k[s]);
        }
        for i in 0..2 {
            let bi = b(model.realizations[seq[i]].d[0]);
            for s in 0..2 {
                let mut coefs = vec![(xi(c, i + 1) + s, 1.0), (ui(c, i), -bi[(s, 0)])];
                coefs.extend((0..2).map(|t| (xi(c, i) + t, -a[(s, t)])));
                row(&coefs, 0.0);
            }
        }
    }
    for c in 1..nc {
        row(&[(ui(c, 0), 1.0), (ui(0, 0), -1.0)], 0.0);
        for e in 0..c {
            if tree.sequences[c][0] == tree.sequences[e][0] {
                row(&[(ui(c, 1), 1.0), (ui(e, 1), -1.0)], 0.0);
                break;
            }
        }
    }
    let m = rows.len();
    let mut kkt = DMatrix::<f64>::zeros(nv + m, nv + m);
    let mut rhs = DVector::<f64>::zeros(nv + m);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
    for (i, (v, b)) in rows.iter().enumerate() {
        for j in 0..nv {
            kkt[(nv + i, j)] = v[j];
            kkt[(j, nv + i)] = v[j];
        }
        rhs[nv + i] = *b;
    }
    let z = kkt.lu().solve(&rhs).ok_or("singular KKT matrix")?;
    let mut err: f64 = 0.0;
    for c in 0..nc {
        for i in 0..=2 {
            let xs = p.state(&sol.w, c, i);
            for s in 0..2 {
                err = err.max((xs[s] - z[xi(c, i) + s]).abs());
            }
        }
        for i in 0..2 {
            err = err.max((p.input(&sol.w, c, i)[0] - z[ui(c, i)]).abs());
        }
    }
    Ok(Outcome::new(err <= 1e-6, format!("{nc} scenarios, {m} equalities, max |w_nlp - w_qp| = {err:.1e}")))
}

fn c8_spring_closed_loop() -> Result<Outcome, String> {
    let rc = RunConfig { model: Some("spring_mass".into()), ..RunConfig::default() };
    let run = rc.resolve().map_err(|e| e.to_string())?;
    let cfg = run.closed_loop_config().map_err(|e| e.to_string())?;
    let log = run_closed_loop(&cfg).map_err(|e| e.to_string())?;
    let inf_norm = |x: &[f64]| x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let reached =
        log.records.iter().map(|r| r.x.as_slice()).chain([log.final_state.as_slice()]).position(|x| inf_norm(x) < 0.05);
    let hz = log.horizons();
    let tail = &hz[hz.len().saturating_sub(10)..];
    let settled = !tail.is_empty() && tail.iter().all(|&n| n == 3);
    let head: Vec<usize> = hz.iter().take(8).copied().collect();
    let mut detail = format!(
        "x0 = (-4, 4): |x| < 0.05 at k = {}, N = {head:?}.., last 10 N = {tail:?}, events {}; ",
        reached.map_or("never".into(), |k| k.to_string()),
        log.infeasibility_events()
    );
    let mut pass =
        reached.is_some_and(|k| k <= 60) && settled && log.aborted.is_none() && log.infeasibility_events() == 0;

    // Random starts: a start is feasible when the first solve (N_0, with the
    // cold retry) succeeds; every later solver failure counts as an event.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut accepted, mut rejected, mut events) = (0, 0, 0);
    while accepted < 50 {
        let x0 = vec![rng.random_range(-4.0..=4.0), rng.random_range(-4.0..=4.0)];
        let mut c = cfg.clone();
        c.x0 = x0;
        c.steps = 20;
        c.seed = rng.random();
        let log = run_closed_loop(&c).map_err(|e| e.to_string())?;
        let first_failed = log.records.is_empty() || log.solver_events.iter().any(|e| e.k == 0 && !e.recovered);
        if first_failed {
            rejected += 1;
            continue;
        }
        accepted += 1;
        events += log.infeasibility_events() + usize::from(log.aborted.is_some());
    }
    pass &= events == 0;
    detail.push_str(&format!(
        "{accepted} random feasible starts ({rejected} infeasible draws skipped), {events} infeasibility events"
    ));
    Ok(Outcome::new(pass, detail))
}

fn c9_fixed_vs_adaptive() -> Result<Outcome, String> {
    let mut pass = true;
    let mut detail = String::new();
    for (model, min_saving) in [("cstr", 30.0), ("quad_tank", 15.0)] {
        for n_r in [1, 2] {
            let mut logs = Vec::new();
            for mode in [HorizonMode::Fixed, HorizonMode::Adaptive] {
                let rc =
                    RunConfig { model: Some(model.into()), mode: Some(mode), n_r: Some(n_r), ..RunConfig::default() };
                let cfg = rc.resolve().and_then(|r| r.closed_loop_config()).map_err(|e| e.to_string())?;
                logs.push(run_closed_loop(&cfg).map_err(|e| e.to_string())?);
            }
            let s = compare_runs(&logs[0], &logs[1]).map_err(|e| e.to_string())?;
            let ok = (s.cost_ratio - 1.0).abs() <= 0.05
                && s.time_saving_pct >= min_saving
                && logs.iter().all(|l| l.aborted.is_none());
            pass &= ok;
            detail.push_str(&format!(
                "{model} N_R={n_r}: ratio {:.4}, saving {:.1}% ({:.1} -> {:.1} s); ",
                s.cost_ratio,
                s.time_saving_pct,
                s.total_solve_ms[0] / 1e3,
                s.total_solve_ms[1] / 1e3
            ));
        }
    }
    Ok(Outcome::new(pass, detail.trim_end_matches("; ").to_string()))
}

fn c10_nominal_descent() -> Result<Outcome, String> {
    let rc = RunConfig {
        model: Some("spring_mass".into()),
        disturbance: Some(DisturbanceSource::Nominal),
        ..RunConfig::default()
    };
    let cfg = rc.resolve().and_then(|r| r.closed_loop_config()).map_err(|e| e.to_string())?;
    let log = run_closed_loop(&cfg).map_err(|e| e.to_string())?;
    let rep = nominal_descent_check(&log, 1e-6);
    let worst = rep.violations.iter().map(|v| v.excess).fold(0.0, f64::max);
    Ok(Outcome::new(
        rep.passed() && rep.nominal && log.aborted.is_none(),
        format!("{} steps checked, {} violations, largest excess {worst:.1e}", rep.checked, rep.violations.len()),
    ))
}

fn c11_region_invariance() -> Result<Outcome, String> {
    let mut pass = true;
    let mut detail = String::new();
    for name in ["spring_mass", "cstr", "quad_tank"] {
        let model = builtin::by_name(name).expect("builtin");
        // The ingredients each example runs with.
        let cfg = match name {
            "spring_mass" => spring_mass_reported_config(&model),
            "quad_tank" => quad_tank_reported_config(&model),
            _ => TerminalConfig::example(&model).expect("builtin"),
        };
        let ing = ingredients(&model, &cfg)?;
        let checks = check_terminal_region(&model, &ing, 10_000, 1).map_err(|e| e.to_string())?;
        let v: usize = checks.iter().map(|c| c.violations()).sum();
        let tested: usize = checks.iter().map(|c| c.n_samples - c.n_outside_bounds).sum();
        let (ball, desc, inp, st) = checks.iter().fold((0, 0, 0, 0), |a, c| {
            (a.0 + c.ball_violations, a.1 + c.descent_violations, a.2 + c.input_violations, a.3 + c.state_violations)
        });
        pass &= v == 0;
        detail.push_str(&format!(
            "{name}: {v} violations in {tested} tested samples (ball {ball}, descent {desc}, input {inp}, state {st}); "
        ));
    }
    Ok(Outcome::new(pass, detail.trim_end_matches("; ").to_string()))
}

/// Comma-separated criterion numbers to run; all when unset.
const ONLY_ENV: &str = "MSMPC_ACCEPTANCE_ONLY";

type Check = fn() -> Result<Outcome, String>;

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("scenario combinatorics", c1_combinatorics),
        ("spring-mass terminal radii", c2_spring_radii),
        ("spring-mass error-bound fit", c3_spring_fit),
        ("CSTR / quad-tank radii", c4_benchmark_radii),
        ("Riccati / Lyapunov residuals", c5_riccati_lyapunov),
        ("sensitivity predictor order", c6_predictor_order),
        ("brute-force QP equivalence", c7_brute_force),
        ("spring-mass closed loop", c8_spring_closed_loop),
        ("fixed vs adaptive fidelity", c9_fixed_vs_adaptive),
        ("nominal descent", c10_nominal_descent),
        ("terminal-region invariance", c11_region_invariance),
    ];
    let only: Option<Vec<usize>> =
        std::env::var(ONLY_ENV).ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut results = Vec::new();
    for (i, (title, f)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_none_or(|o| o.contains(&(i + 1))) {
            results.push(run(i + 1, title, f));
        }
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

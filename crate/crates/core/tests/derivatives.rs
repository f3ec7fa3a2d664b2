//! Forward-mode AD through RK4 against central finite differences.

use msmpc::model::builtin::{self, MODEL_NAMES};
use msmpc::model::{cost_derivatives, step_derivatives, SystemModel};

/// A point inside the bounds of each model, away from its equilibria.
fn point(model: &SystemModel) -> (Vec<f64>, Vec<f64>) {
    match model.name.as_str() {
        "spring_mass" => (vec![-1.3, 0.7], vec![0.4]),
        "cstr" => (vec![0.9, 0.45, 130.0, 128.0], vec![12.0, -3000.0]),
        "quad_tank" => (vec![14.0, 13.0, 10.0, 9.0], vec![40.0, 35.0]),
        _ => (vec![0.5; model.n_x], vec![0.2; model.n_u]),
    }
}

fn scales(model: &SystemModel) -> Vec<f64> {
    model.x_scale.iter().chain(&model.u_scale).copied().collect()
}

fn split(model: &SystemModel, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (v[..model.n_x].to_vec(), v[model.n_x..].to_vec())
}

#[test]
fn step_jacobian_and_hessian_match_finite_differences() {
    for name in MODEL_NAMES {
        let model = builtin::by_name(name).unwrap();
        let (x, u) = point(&model);
        let v: Vec<f64> = x.iter().chain(&u).copied().collect();
        let s = scales(&model);
        let nv = v.len();
        for real in &model.realizations {
            let ad = step_derivatives(&model, &x, &u, &real.d);
            let f = |w: &[f64]| {
                let (x, u) = split(&model, w);
                model.step(&x, &u, &real.d).unwrap()
            };
            for j in 0..nv {
                let h = 1e-6 * s[j];
                let (mut vp, mut vm) = (v.clone(), v.clone());
                vp[j] += h;
                vm[j] -= h;
                let (fp, fm) = (f(&vp), f(&vm));
                let dp = step_derivatives(&model, &split(&model, &vp).0, &split(&model, &vp).1, &real.d);
                let dm = step_derivatives(&model, &split(&model, &vm).0, &split(&model, &vm).1, &real.d);
                for i in 0..model.n_x {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let scale = model.x_scale[i] / s[j];
                    assert!(
                        (fd - ad.jac[i][j]).abs() <= 1e-5 * scale.max(ad.jac[i][j].abs()),
                        "{name} {}: df{i}/dv{j} fd {fd} ad {}",
                        real.label,
                        ad.jac[i][j]
                    );
                    for k in 0..nv {
                        let fd2 = (dp.jac[i][k] - dm.jac[i][k]) / (2.0 * h);
                        let a2 = ad.hess[i][j * nv + k];
                        let scale2 = model.x_scale[i] / (s[j] * s[k]);
                        assert!(
                            (fd2 - a2).abs() <= 1e-4 * scale2.max(a2.abs()),
                            "{name} {}: d2f{i}/dv{j}dv{k} fd {fd2} ad {a2}",
                            real.label
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn cost_gradient_matches_finite_differences() {
    for name in MODEL_NAMES {
        let model = builtin::by_name(name).unwrap();
        let (x, u) = point(&model);
        let u_prev: Vec<f64> = u.iter().map(|v| v * 0.9).collect();
        let refs = model.refs.clone();
        let ad = cost_derivatives(&model, &x, &u, Some(&u_prev), &refs);
        let v: Vec<f64> = x.iter().chain(&u).chain(&u_prev).copied().collect();
        let s: Vec<f64> = scales(&model).into_iter().chain(model.u_scale.iter().copied()).collect();
        let cost = |w: &[f64]| {
            let (n_x, n_u) = (model.n_x, model.n_u);
            cost_derivatives(&model, &w[..n_x], &w[n_x..n_x + n_u], Some(&w[n_x + n_u..]), &refs).value
        };
        for j in 0..v.len() {
            let h = 1e-6 * s[j];
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[j] += h;
            vm[j] -= h;
            let fd = (cost(&vp) - cost(&vm)) / (2.0 * h);
            let tol = 1e-6 * (ad.value.abs() / s[j]).max(ad.grad[j].abs()).max(1e-8);
            assert!((fd - ad.grad[j]).abs() <= tol, "{name}: dl/dv{j} fd {fd} ad {}", ad.grad[j]);
        }
    }
}

use chstep_core::diagnostics::{convergence_order, energy, modified_energy, volume};
use chstep_core::driver::{simulate, RunOptions, Scheme, Starter, StepPlan};
use chstep_core::meshing::{adaptive_next_step, random_mesh, uniform_mesh, AdaptiveConfig};
use chstep_core::schemes::{SolverState, DEFECT_FACTOR};
use chstep_core::{Field, FixedPointConfig, Grid, ModelParams, Problem};
use proptest::prelude::*;
use std::f64::consts::PI;

fn problem(m: usize) -> Problem {
    Problem::new(ModelParams::new(0.01, 0.05, 2.0 * PI, m).unwrap()).unwrap()
}

/// Sum of a few low Fourier modes with the given amplitudes, plus an offset.
fn smooth_field(grid: &Grid, amps: &[f64], offset: f64) -> Field {
    grid.field_from_fn(|x, y| {
        let mut v = offset;
        for (k, a) in amps.iter().enumerate() {
            let (l, m) = ((k % 3 + 1) as f64, (k / 3) as f64);
            v += a * ((l * x + 0.3 * k as f64).sin() * (m * y).cos() + 0.5 * (m * x - l * y).cos());
        }
        v
    })
}

fn amps() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.4f64..0.4, 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_scheme_step_conserves_volume(a in amps(), b in amps(), offset in -0.3f64..0.3,
                                          tau in 1e-3f64..0.1, ratio in 0.2f64..4.0) {
        let p = problem(32);
        let cfg = FixedPointConfig::default();
        let phi0 = smooth_field(p.grid(), &a, offset);
        let phi1 = smooth_field(p.grid(), &b, offset);
        let v0 = volume(&p, &phi0);
        let l2 = p.params().length.powi(2);
        let state = SolverState {
            phi_prev: phi1.clone(),
            phi_prev2: Some(phi0.clone()),
            tau_prev: Some(tau / ratio),
            tau_cur: tau,
            time_prev: 1.0,
            level: 2,
        };
        let mut out = vec![
            p.bdf2_step(&state, &cfg).unwrap().phi,
            p.cn_step(&state, &cfg).unwrap().phi,
            p.cncs_step(&state, &cfg).unwrap().phi,
        ];
        for f in &out {
            prop_assert!((volume(&p, f) - volume(&p, &phi1)).abs() <= 1e-10 * l2);
        }
        out.clear();
        out.push(p.bdf1_step(&phi0, 0.0, tau, &cfg).unwrap().phi);
        out.push(p.trapezoidal_step(&phi0, 0.0, tau, &cfg).unwrap().phi);
        out.push(p.sdirk2_start(&phi0, 0.0, tau, &cfg).unwrap().phi);
        out.push(p.convex_splitting_first_step(&phi0, 0.0, tau, &cfg).unwrap().phi);
        let (s1, s2) = p.tr_bdf2_start(&phi0, 0.0, 0.6 * tau, 0.4 * tau, &cfg).unwrap();
        out.push(s1.phi);
        out.push(s2.phi);
        for f in &out {
            prop_assert!((volume(&p, f) - v0).abs() <= 1e-10 * l2);
        }
    }

    #[test]
    fn bdf2_defect_within_contract(a in amps(), b in amps(), tau in 1e-4f64..0.1, ratio in 0.05f64..4.0) {
        let p = problem(32);
        let cfg = FixedPointConfig::default();
        let state = SolverState {
            phi_prev: smooth_field(p.grid(), &b, 0.1),
            phi_prev2: Some(smooth_field(p.grid(), &a, 0.1)),
            tau_prev: Some(tau / ratio),
            tau_cur: tau,
            time_prev: 0.5,
            level: 5,
        };
        let step = p.bdf2_step(&state, &cfg).unwrap();
        let defect = p.bdf2_defect(&state, &step.phi).unwrap();
        prop_assert!(defect <= DEFECT_FACTOR * cfg.tol, "defect {defect}");
    }

    #[test]
    fn controller_output_in_range(tau_n in 1e-6f64..1.0, rate in 0.0f64..1e4,
                                  beta in 1.0f64..1e4, r_user in 0.5f64..4.8) {
        let cfg = AdaptiveConfig { tau_min: 1e-4, tau_max: 0.1, beta, r_user };
        let next = adaptive_next_step(&cfg, tau_n, rate).unwrap();
        prop_assert!(next >= cfg.tau_min.min(r_user * tau_n) * (1.0 - 1e-15));
        prop_assert!(next <= cfg.tau_max);
        prop_assert!(next <= r_user * tau_n * (1.0 + 1e-15));
    }

    #[test]
    fn random_mesh_sums_to_horizon(t in 0.1f64..100.0, n in 1usize..2000, seed in any::<u64>()) {
        let mesh = random_mesh(t, n, seed).unwrap();
        let total: f64 = mesh.steps().iter().sum();
        prop_assert!((total - t).abs() <= 1e-12 * t);
        prop_assert!(mesh.steps().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn energy_nonnegative_and_modified_dominates(a in amps(), b in amps(), offset in -1.5f64..1.5,
                                                 tau in 1e-4f64..0.1, r in 0.1f64..4.0) {
        let p = problem(16);
        let phi = smooth_field(p.grid(), &a, offset);
        let prev = smooth_field(p.grid(), &b, offset);
        let e = energy(&p, &phi);
        prop_assert!(e >= 0.0);
        // Equal volumes keep the H⁻¹ difference well defined.
        let shift = (volume(&p, &phi) - volume(&p, &prev)) / p.params().length.powi(2);
        let prev = prev.map(|v| v + shift);
        let me = modified_energy(&p, &phi, &prev, tau, r * tau).unwrap();
        prop_assert!(me >= e);
    }

    #[test]
    fn orders_are_scale_invariant(errs in prop::collection::vec(1e-8f64..1.0, 2..6), scale in 1e-6f64..1e6) {
        let taus: Vec<f64> = (0..errs.len()).map(|k| 0.1 / 2f64.powi(k as i32)).collect();
        let scaled: Vec<f64> = errs.iter().map(|e| e * scale).collect();
        let a = convergence_order(&errs, &taus).unwrap();
        let b = convergence_order(&scaled, &taus).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}

#[test]
fn energy_vanishes_only_at_pure_phases() {
    let p = problem(16);
    for c in [-1.0, 1.0] {
        assert!(energy(&p, &Field::constant(16, c)) < 1e-28);
    }
    assert!(energy(&p, &Field::constant(16, 0.5)) > 0.0);
}

#[test]
fn random_mesh_mean_step_approaches_uniform() {
    for n in [100, 1000, 10_000] {
        let mesh = random_mesh(1.0, n, 11).unwrap();
        let mean = mesh.steps().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0 / n as f64).abs() <= 1e-12);
    }
}

#[test]
fn adaptive_runs_respect_bounds() {
    let p = problem(16);
    let phi0 = smooth_field(p.grid(), &[0.3, -0.2, 0.1, 0.05, 0.0, 0.1], 0.0);
    for beta in [10.0, 1e3, 1e5] {
        let config = AdaptiveConfig { tau_min: 1e-4, tau_max: 0.1, beta, r_user: 3.0 };
        let plan = StepPlan::Adaptive { config, final_time: 2.0, initial_step: None };
        let out = simulate(&p, &phi0, &RunOptions::new(Scheme::Bdf2, plan), &mut |_, _, _| {}).unwrap();
        let steps = out.mesh.steps();
        assert!((out.mesh.final_time() - 2.0).abs() < 1e-12);
        // The last step may be shortened to land on the final time.
        for &s in &steps[..steps.len() - 1] {
            assert!(s >= config.tau_min * (1.0 - 1e-9) && s <= config.tau_max * (1.0 + 1e-12));
        }
        assert!(out.mesh.max_ratio() <= config.r_user * (1.0 + 1e-12));
    }
}

/// Along an energy-stable run the modified energy bounds the H¹ norm:
/// `‖∇φ‖² ≤ 2𝓔¹/ε²` and `‖φ‖² ≤ |Ω| + 2√(|Ω| 𝓔¹)` (from `φ² ≤ 1 + 2√F`).
#[test]
fn h1_norm_stays_bounded_on_energy_safe_runs() {
    let p = Problem::new(ModelParams::new(0.05, 0.1, 2.0 * PI, 32).unwrap()).unwrap();
    let grid = p.grid().clone();
    let phi0 = smooth_field(&grid, &[0.5, -0.3, 0.2, 0.1, -0.1, 0.2], 0.05);
    let config = AdaptiveConfig { tau_min: 1e-4, tau_max: 0.1, beta: 1e3, r_user: 4.0 };
    let plan = StepPlan::Adaptive { config, final_time: 5.0, initial_step: None };
    let mut opts = RunOptions::new(Scheme::Bdf2, plan);
    opts.energy_safe = true;
    let mut h1 = Vec::new();
    let out = simulate(&p, &phi0, &opts, &mut |_, _, phi| {
        h1.push(grid.norm_l2(phi) + grid.seminorm_h1(phi));
    })
    .unwrap();
    let e1 = out.record.rows()[1].modified_energy.unwrap();
    let area = p.params().length.powi(2);
    let bound = (area + 2.0 * (area * e1).sqrt()).sqrt() + (2.0 * e1 / p.params().eps2()).sqrt();
    for (n, v) in h1.iter().enumerate().skip(1) {
        assert!(*v <= bound, "level {n}: {v} > {bound}");
    }
}

#[test]
fn starters_are_second_order() {
    // One-step error of each starter on the manufactured solution.
    use chstep_core::schemes::ManufacturedSolution;
    use std::sync::Arc;
    let params = ModelParams::new(1.0, 0.5f64.sqrt(), 2.0 * PI, 16).unwrap();
    let p = Problem::new(params).unwrap().with_forcing(Arc::new(ManufacturedSolution));
    let exact = |t: f64| ManufacturedSolution.exact(p.grid(), t);
    let err = |starter: Starter, steps: usize| {
        let mesh = uniform_mesh(0.2, steps).unwrap();
        let mut opts = RunOptions::new(Scheme::Bdf2, StepPlan::Mesh(mesh));
        opts.starter = Some(starter);
        let out = simulate(&p, &exact(0.0), &opts, &mut |_, _, _| {}).unwrap();
        out.final_field.max_abs_diff(&exact(0.2))
    };
    for starter in [Starter::TrBdf2, Starter::Sdirk2] {
        let (e1, e2) = (err(starter, 20), err(starter, 40));
        let order = (e1 / e2).log2();
        assert!(order > 1.8, "{starter:?}: order {order}");
    }
}

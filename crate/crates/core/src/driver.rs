//! The time loop: starting step, scheme steps, step-size selection, records.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{energy, modified_energy_projected, volume, RecordRow, RunRecord};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::kernels::TimeMesh;
use crate::meshing::{adaptive_next_step, stability_cap, AdaptiveConfig};
use crate::schemes::{FixedPointConfig, Problem, SolverState, Step, TR_BDF2_GAMMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Variable-step BDF2.
    Bdf2,
    /// Crank–Nicolson (one-step, self-starting).
    Cn,
    /// Crank–Nicolson convex splitting (two-step).
    Cncs,
}

/// Method for the first step of a two-step scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Starter {
    /// One TR-BDF2 step: a trapezoidal substep over `γτ₁` and a BDF2 substep
    /// over `(1 − γ)τ₁`, `γ = 2 − √2`; the intermediate level is not recorded.
    TrBdf2,
    /// Two-stage L-stable SDIRK.
    Sdirk2,
    /// Backward Euler.
    Bdf1,
    /// First-order convex splitting.
    ConvexSplitting,
}

impl Scheme {
    pub fn default_starter(self) -> Option<Starter> {
        match self {
            Scheme::Bdf2 => Some(Starter::TrBdf2),
            Scheme::Cn => None,
            Scheme::Cncs => Some(Starter::ConvexSplitting),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bdf2 => "bdf2",
            Scheme::Cn => "cn",
            Scheme::Cncs => "cncs",
        }
    }
}

/// How step sizes are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum StepPlan {
    /// Follow a prescribed mesh.
    Mesh(TimeMesh),
    /// Adaptive controller on `[0, final_time]`; the first step defaults to
    /// `τ_min`.
    Adaptive {
        config: AdaptiveConfig,
        final_time: f64,
        initial_step: Option<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub scheme: Scheme,
    /// `None` selects [`Scheme::default_starter`].
    pub starter: Option<Starter>,
    pub plan: StepPlan,
    pub fixed_point: FixedPointConfig,
    /// Enforce the energy-stability step cap on BDF2 steps.
    pub energy_safe: bool,
    /// Ratio bound used by the cap on mesh plans (adaptive plans use their own).
    pub r_user: f64,
    /// Times at which the field is stored; adaptive runs land on them exactly.
    pub snapshot_times: Vec<f64>,
}

impl RunOptions {
    pub fn new(scheme: Scheme, plan: StepPlan) -> Self {
        Self {
            scheme,
            starter: None,
            plan,
            fixed_point: FixedPointConfig::default(),
            energy_safe: false,
            r_user: 4.0,
            snapshot_times: Vec::new(),
        }
    }

    fn starter(&self) -> Result<Option<Starter>> {
        match (self.scheme, self.starter) {
            (Scheme::Cn, Some(s)) => Err(Error::Config(format!(
                "Crank–Nicolson is self-starting; starter {s:?} not applicable"
            ))),
            (scheme, None) => Ok(scheme.default_starter()),
            (_, s) => Ok(s),
        }
    }

    fn validate(&self) -> Result<()> {
        self.fixed_point.validate()?;
        if let StepPlan::Adaptive { config, final_time, initial_step } = &self.plan {
            config.validate()?;
            if !(*final_time > 0.0) {
                return Err(Error::Config(format!("final time must be positive, got {final_time}")));
            }
            if initial_step.is_some_and(|t| !(t > 0.0)) {
                return Err(Error::NonPositiveStep(initial_step.unwrap_or(0.0)));
            }
            if self.scheme == Scheme::Cncs {
                return Err(Error::Config("the CNCS scheme is defined for uniform steps only".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub field: Field,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    /// The mesh actually used.
    pub mesh: TimeMesh,
    pub final_field: Field,
    pub snapshots: Vec<Snapshot>,
    pub total_iterations: usize,
    /// Adaptive steps retried with half the step size.
    pub rejections: usize,
    pub wall_seconds: f64,
}

/// Per-level callback `(n, t_n, φⁿ)`, called for `n = 0, 1, …`.
pub type Observer<'a> = dyn FnMut(usize, f64, &Field) + 'a;

/// Advances `phi0` according to `opts`.
pub fn simulate(problem: &Problem, phi0: &Field, opts: &RunOptions, observer: &mut Observer<'_>) -> Result<RunOutput> {
    opts.validate()?;
    let starter = opts.starter()?;
    if phi0.size() != problem.grid().size() {
        return Err(Error::InvalidGrid(format!(
            "initial field has size {}, grid has {}",
            phi0.size(),
            problem.grid().size()
        )));
    }
    let clock = Instant::now();
    let (t0, t_end) = match &opts.plan {
        StepPlan::Mesh(mesh) => (mesh.levels()[0], mesh.final_time()),
        StepPlan::Adaptive { final_time, .. } => (0.0, *final_time),
    };
    let mut targets: Vec<f64> = opts
        .snapshot_times
        .iter()
        .copied()
        .filter(|&s| s > t0 && s < t_end)
        .collect();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    targets.push(t_end);
    let mut snapshot_queue: Vec<f64> = opts.snapshot_times.iter().copied().filter(|&s| s >= t0).collect();
    snapshot_queue.sort_by(f64::total_cmp);
    snapshot_queue.dedup();

    let mut record = RunRecord::new();
    let mut levels = vec![t0];
    let mut snapshots = Vec::new();
    let mut take_snapshot = |t: f64, phi: &Field, snapshots: &mut Vec<Snapshot>| {
        while let Some(&s) = snapshot_queue.first() {
            if (t - s).abs() <= 1e-12 * s.abs().max(1.0) {
                snapshots.push(Snapshot { t, field: phi.clone() });
                snapshot_queue.remove(0);
            } else if s < t {
                snapshot_queue.remove(0);
            } else {
                break;
            }
        }
    };

    record.push(RecordRow {
        n: 0,
        t: t0,
        tau: None,
        r: None,
        energy: energy(problem, phi0),
        modified_energy: None,
        volume: volume(problem, phi0),
        iters: None,
        wall_ms: 0.0,
    })?;
    observer(0, t0, phi0);
    take_snapshot(t0, phi0, &mut snapshots);

    let mut phi = phi0.clone();
    let mut phi_prev: Option<Field> = None;
    let mut tau_prev: Option<f64> = None;
    let mut total_iterations = 0;
    let mut rejections = 0;
    let mut target_idx = 0;
    let mut n = 0;

    loop {
        let t = *levels.last().expect("levels never empty");
        let done = match &opts.plan {
            StepPlan::Mesh(mesh) => n == mesh.num_steps(),
            StepPlan::Adaptive { .. } => t >= t_end,
        };
        if done {
            break;
        }
        n += 1;
        while target_idx + 1 < targets.len() && targets[target_idx] <= t {
            target_idx += 1;
        }

        // Propose τ_n.
        let mut tau = match &opts.plan {
            StepPlan::Mesh(mesh) => mesh.step(n),
            StepPlan::Adaptive {
                config, initial_step, ..
            } => {
                let proposal = if n == 1 {
                    initial_step.unwrap_or(config.tau_min)
                } else {
                    let tp = tau_prev.expect("set after the first step");
                    let prev = phi_prev.as_ref().expect("set after the first step");
                    let rate = problem.grid().norm_l2(&phi.lincomb(1.0 / tp, prev, -1.0 / tp));
                    adaptive_next_step(config, tp, rate)?
                };
                let mut tau = proposal;
                if opts.energy_safe && opts.scheme == Scheme::Bdf2 && n >= 2 {
                    tau = capped_step(problem, tau, tau_prev.expect("n ≥ 2"), config.r_user)
                        .map_err(|e| e.at_level(n))?;
                }
                land(tau, targets[target_idx] - t, config.tau_min)
            }
        };
        if let (true, Scheme::Bdf2, StepPlan::Mesh(_)) = (opts.energy_safe && n >= 2, opts.scheme, &opts.plan) {
            let tp = tau_prev.expect("n ≥ 2");
            let cap = stability_cap(problem.params(), tau / tp, opts.r_user).map_err(|e| e.at_level(n))?;
            if tau > cap {
                return Err(Error::Config(format!(
                    "mesh step τ = {tau} exceeds the energy-stability cap {cap}"
                ))
                .at_level(n));
            }
        }

        // Take the step, halving on solver failure for adaptive plans.
        let (step, wall_ms) = loop {
            let start = Instant::now();
            let state = SolverState {
                phi_prev: phi.clone(),
                phi_prev2: phi_prev.clone(),
                tau_prev,
                tau_cur: tau,
                time_prev: t,
                level: n,
            };
            let result = advance(problem, &state, opts.scheme, starter, &opts.fixed_point);
            match (result, &opts.plan) {
                (Ok(step), _) => break (step, start.elapsed().as_secs_f64() * 1e3),
                (Err(Error::FixedPointDiverged { .. }), StepPlan::Adaptive { config, .. })
                    if tau > config.tau_min * (1.0 + 1e-12) =>
                {
                    tau = (0.5 * tau).max(config.tau_min);
                    rejections += 1;
                }
                (Err(e), _) => return Err(e.at_level(n)),
            }
        };
        if !step.phi.is_finite() {
            return Err(Error::FixedPointDiverged {
                iterations: step.iterations,
                update: f64::NAN,
            }
            .at_level(n));
        }
        total_iterations += step.iterations;

        // The modified energy of the previous level needs τ_n.
        if let (Some(prev), Some(tp)) = (&phi_prev, tau_prev) {
            let me = modified_energy_projected(problem, &phi, prev, tp, tau).map_err(|e| e.at_level(n - 1))?;
            if let Some(row) = record.last_mut() {
                row.modified_energy = Some(me);
            }
        }

        let t_new = match &opts.plan {
            StepPlan::Mesh(mesh) => mesh.levels()[n],
            StepPlan::Adaptive { .. } => {
                let target = targets[target_idx];
                if (t + tau - target).abs() <= 1e-12 * target.abs().max(1.0) {
                    target
                } else {
                    t + tau
                }
            }
        };
        record.push(RecordRow {
            n,
            t: t_new,
            tau: Some(t_new - t),
            r: tau_prev.map(|tp| (t_new - t) / tp),
            energy: energy(problem, &step.phi),
            modified_energy: None,
            volume: volume(problem, &step.phi),
            iters: Some(step.iterations),
            wall_ms,
        })?;
        observer(n, t_new, &step.phi);
        take_snapshot(t_new, &step.phi, &mut snapshots);

        tau_prev = Some(t_new - t);
        phi_prev = Some(std::mem::replace(&mut phi, step.phi));
        levels.push(t_new);
    }

    // No successor step: the modified energy falls back to the energy.
    if n >= 1 {
        if let Some(row) = record.last_mut() {
            row.modified_energy = Some(row.energy);
        }
    }
    Ok(RunOutput {
        record,
        mesh: TimeMesh::from_levels(levels)?,
        final_field: phi,
        snapshots,
        total_iterations,
        rejections,
        wall_seconds: clock.elapsed().as_secs_f64(),
    })
}

fn advance(
    problem: &Problem,
    state: &SolverState,
    scheme: Scheme,
    starter: Option<Starter>,
    cfg: &FixedPointConfig,
) -> Result<Step> {
    if scheme == Scheme::Cn {
        return problem.cn_step(state, cfg);
    }
    if state.level == 1 {
        let (phi0, t0, tau) = (&state.phi_prev, state.time_prev, state.tau_cur);
        return match starter.unwrap_or(Starter::TrBdf2) {
            Starter::TrBdf2 => {
                let (a, b) = problem.tr_bdf2_start(phi0, t0, TR_BDF2_GAMMA * tau, (1.0 - TR_BDF2_GAMMA) * tau, cfg)?;
                Ok(Step {
                    phi: b.phi,
                    iterations: a.iterations + b.iterations,
                })
            }
            Starter::Sdirk2 => problem.sdirk2_start(phi0, t0, tau, cfg),
            Starter::Bdf1 => problem.bdf1_step(phi0, t0, tau, cfg),
            Starter::ConvexSplitting => problem.convex_splitting_first_step(phi0, t0, tau, cfg),
        };
    }
    match scheme {
        Scheme::Bdf2 => problem.bdf2_step(state, cfg),
        Scheme::Cncs => problem.cncs_step(state, cfg),
        Scheme::Cn => unreachable!("handled above"),
    }
}

/// Shrinks `tau` until it satisfies the energy-stability cap at ratio
/// `tau / tau_prev`.
fn capped_step(problem: &Problem, mut tau: f64, tau_prev: f64, r_user: f64) -> Result<f64> {
    for _ in 0..64 {
        let cap = stability_cap(problem.params(), tau / tau_prev, r_user)?;
        if tau <= cap {
            return Ok(tau);
        }
        tau = cap;
    }
    Err(Error::Config(format!("could not satisfy the energy-stability cap from τ_(n-1) = {tau_prev}")))
}

/// Adjusts a proposed step so the run lands on the next target time without
/// leaving a remainder shorter than `tau_min`.
fn land(tau: f64, gap: f64, tau_min: f64) -> f64 {
    if gap <= tau {
        gap
    } else if gap - tau < tau_min {
        if gap >= 2.0 * tau_min {
            gap - tau_min
        } else {
            gap
        }
    } else {
        tau
    }
}

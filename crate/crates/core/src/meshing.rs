//! Time-mesh generation and adaptive step selection.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{r_l, r_star, TimeMesh};
use crate::schemes::ModelParams;

/// `N` equal steps on `[0, T]`.
pub fn uniform_mesh(final_time: f64, steps: usize) -> Result<TimeMesh> {
    check_horizon(final_time, steps)?;
    let tau = final_time / steps as f64;
    let mut levels: Vec<f64> = (0..=steps).map(|k| k as f64 * tau).collect();
    levels[steps] = final_time;
    TimeMesh::from_levels(levels)
}

/// Random mesh `τ_k = T σ_k / Σσ`, `σ_k ~ U(0, 1)`, deterministic per seed.
pub fn random_mesh(final_time: f64, steps: usize, seed: u64) -> Result<TimeMesh> {
    check_horizon(final_time, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // U(0, 1) open at 0 so that every step is positive.
    let sigma: Vec<f64> = (0..steps)
        .map(|_| loop {
            let s: f64 = rng.random();
            if s > 0.0 {
                break s;
            }
        })
        .collect();
    let total: f64 = sigma.iter().sum();
    let mut levels = Vec::with_capacity(steps + 1);
    let mut t = 0.0;
    levels.push(t);
    for s in &sigma {
        t += final_time * s / total;
        levels.push(t);
    }
    // Absorb the summation roundoff so that t_N = T exactly.
    levels[steps] = final_time;
    TimeMesh::from_levels(levels)
}

/// Mesh on `[0, N]` (unit first step) whose ratios are drawn i.i.d. from
/// `U(lo, hi)`; used to exercise the kernel bounds.
pub fn random_ratio_mesh(steps: usize, lo: f64, hi: f64, seed: u64) -> Result<TimeMesh> {
    if steps == 0 || !(lo > 0.0) || !(hi > lo) {
        return Err(Error::Config(format!(
            "random ratio mesh needs steps ≥ 1 and 0 < lo < hi, got {steps}, ({lo}, {hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taus = Vec::with_capacity(steps);
    let mut tau = 1.0;
    taus.push(tau);
    for _ in 1..steps {
        tau *= rng.random_range(lo..hi);
        taus.push(tau);
    }
    // Renormalise so the step sizes stay O(1) regardless of drift.
    let scale = steps as f64 / taus.iter().sum::<f64>();
    let taus: Vec<f64> = taus.iter().map(|t| t * scale).collect();
    TimeMesh::from_steps(0.0, &taus)
}

fn check_horizon(final_time: f64, steps: usize) -> Result<()> {
    if !(final_time > 0.0) || !final_time.is_finite() {
        return Err(Error::Config(format!("final time must be positive, got {final_time}")));
    }
    if steps == 0 {
        return Err(Error::Config("a mesh needs at least one step".into()));
    }
    Ok(())
}

/// Parameters of the controller
/// `τ_ada = max{τ_min, τ_max/√(1 + β‖∂_τφⁿ‖²)}`, `τ_{n+1} = min{τ_ada, r_user τ_n}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub beta: f64,
    #[serde(default = "default_r_user")]
    pub r_user: f64,
}

fn default_r_user() -> f64 {
    4.0
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            tau_min: 1e-4,
            tau_max: 0.1,
            beta: 1e3,
            r_user: default_r_user(),
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max && self.tau_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < tau_min ≤ tau_max, got {} and {}",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.r_user > 0.0 && self.r_user < r_star()) {
            return Err(Error::Config(format!(
                "r_user must lie in (0, {:.4}), got {}",
                r_star(),
                self.r_user
            )));
        }
        Ok(())
    }
}

/// Next step size from the current step and the rate `‖(φⁿ − φⁿ⁻¹)/τ_n‖`.
pub fn adaptive_next_step(cfg: &AdaptiveConfig, tau_n: f64, rate: f64) -> Result<f64> {
    if !(tau_n > 0.0) {
        return Err(Error::NonPositiveStep(tau_n));
    }
    if !(rate >= 0.0) {
        return Err(Error::OutOfDomain(format!("rate must be nonnegative, got {rate}")));
    }
    let ada = (cfg.tau_max / (1.0 + cfg.beta * rate * rate).sqrt()).max(cfg.tau_min);
    Ok(ada.min(cfg.r_user * tau_n))
}

/// Largest step compatible with the discrete energy law at ratio `r_n`:
/// `(4ε²/κ)·min{(1 + 2r_n)/(1 + r_n), R_L(r_n, r_user)}`.
///
/// The law involves the *next* ratio, which is unknown when `τ_n` is chosen;
/// since `R_L` decreases in its second argument, `r_user` is the worst case.
pub fn stability_cap(params: &ModelParams, r_n: f64, r_user: f64) -> Result<f64> {
    if !(r_n > 0.0) || r_n > r_user * (1.0 + 1e-12) {
        return Err(Error::OutOfDomain(format!("ratio {r_n} outside (0, {r_user}]")));
    }
    if !(r_user < r_star()) {
        return Err(Error::OutOfDomain(format!("r_user = {r_user} is not below r* ")));
    }
    let pref = 4.0 * params.eps2() / params.kappa;
    let solvable = (1.0 + 2.0 * r_n) / (1.0 + r_n);
    Ok(pref * solvable.min(r_l(r_n, r_user)?))
}

/// Writes `k,t_k,tau_k,r_k` rows (`tau_0`, `r_0`, `r_1` left empty).
pub fn write_mesh_csv<W: Write>(mesh: &TimeMesh, mut out: W) -> Result<()> {
    writeln!(out, "k,t,tau,r")?;
    for (k, t) in mesh.levels().iter().enumerate() {
        let tau = if k >= 1 { mesh.step(k).to_string() } else { String::new() };
        let r = if k >= 2 { mesh.ratio(k).to_string() } else { String::new() };
        writeln!(out, "{k},{t},{tau},{r}")?;
    }
    Ok(())
}

/// Reads a mesh written by [`write_mesh_csv`]; only the `t` column is used.
pub fn read_mesh_csv<R: BufRead>(input: R) -> Result<TimeMesh> {
    let mut levels = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let t = line
            .split(',')
            .nth(1)
            .ok_or_else(|| Error::Parse(format!("line {}: missing time column", lineno + 1)))?;
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        levels.push(t);
    }
    TimeMesh::from_levels(levels)
}

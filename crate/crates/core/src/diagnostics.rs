//! Energies, volume, run records, convergence orders and scaling fits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::schemes::Problem;

/// `E[φ] = ε²/2 ‖∇_h φ‖² + ⟨F(φ), 1⟩` with `F(φ) = ¼(φ² − 1)²`.
pub fn energy(problem: &Problem, phi: &Field) -> f64 {
    let grid = problem.grid();
    let grad = grid.seminorm_h1(phi);
    let bulk = grid.inner_one(&phi.map(|v| 0.25 * (v * v - 1.0).powi(2)));
    0.5 * problem.params().eps2() * grad * grad + bulk
}

/// `𝓔[φⁿ] = E[φⁿ] + √r_{n+1} τ_{n+1} / (2κ(1 + r_{n+1})) ‖∂_τ φⁿ‖²₋₁`,
/// where `r_{n+1} = τ_{n+1}/τ_n`.
pub fn modified_energy(
    problem: &Problem,
    phi: &Field,
    phi_prev: &Field,
    tau_n: f64,
    tau_next: f64,
) -> Result<f64> {
    if !(tau_n > 0.0) {
        return Err(Error::NonPositiveStep(tau_n));
    }
    if !(tau_next > 0.0) {
        return Err(Error::NonPositiveStep(tau_next));
    }
    let r = tau_next / tau_n;
    let rate = phi.lincomb(1.0 / tau_n, phi_prev, -1.0 / tau_n);
    let hm1 = problem.grid().norm_hm1(&rate)?;
    let aug = r.sqrt() * tau_next / (2.0 * problem.params().kappa * (1.0 + r)) * hm1 * hm1;
    Ok(energy(problem, phi) + aug)
}

/// [`modified_energy`] with the mean of `φⁿ − φⁿ⁻¹` projected out instead of
/// rejected. Used inside time loops, where the difference of two levels has a
/// roundoff-sized mean that can exceed the relative zero-mean tolerance when
/// the solution barely moves; volume drift is tracked separately.
pub fn modified_energy_projected(problem: &Problem, phi: &Field, phi_prev: &Field, tau_n: f64, tau_next: f64) -> Result<f64> {
    if !(tau_n > 0.0) {
        return Err(Error::NonPositiveStep(tau_n));
    }
    if !(tau_next > 0.0) {
        return Err(Error::NonPositiveStep(tau_next));
    }
    let r = tau_next / tau_n;
    let rate = phi.lincomb(1.0 / tau_n, phi_prev, -1.0 / tau_n);
    let hm1 = problem.grid().norm_hm1_projected(&rate);
    let aug = r.sqrt() * tau_next / (2.0 * problem.params().kappa * (1.0 + r)) * hm1 * hm1;
    Ok(energy(problem, phi) + aug)
}

/// `⟨φ, 1⟩`.
pub fn volume(problem: &Problem, phi: &Field) -> f64 {
    problem.grid().inner_one(phi)
}

/// Discrete total variation `Σ |v_{i+1} − v_i|` of a 1-D slice.
pub fn total_variation(slice: &[f64]) -> f64 {
    slice.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// The row `j = M/2` of a field.
pub fn mid_row(phi: &Field) -> &[f64] {
    phi.row(phi.size() / 2)
}

/// One time level of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub n: usize,
    pub t: f64,
    pub tau: Option<f64>,
    pub r: Option<f64>,
    pub energy: f64,
    pub modified_energy: Option<f64>,
    pub volume: f64,
    pub iters: Option<usize>,
    pub wall_ms: f64,
}

/// Per-level history of a run, in strictly increasing time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    rows: Vec<RecordRow>,
}

pub const RECORD_HEADER: &str = "n,t,tau,r,energy,modified_energy,volume,iters,wall_ms";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: RecordRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if !(row.t > last.t) {
                return Err(Error::OutOfDomain(format!(
                    "record times must increase: {} after {}",
                    row.t, last.t
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[RecordRow] {
        &self.rows
    }

    pub(crate) fn last_mut(&mut self) -> Option<&mut RecordRow> {
        self.rows.last_mut()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.energy).collect()
    }

    /// `max_n |⟨φⁿ, 1⟩ − ⟨φ⁰, 1⟩|`.
    pub fn max_volume_drift(&self) -> f64 {
        let Some(first) = self.rows.first() else {
            return 0.0;
        };
        self.rows.iter().map(|r| (r.volume - first.volume).abs()).fold(0.0, f64::max)
    }

    /// Writes the record as CSV; `with_wall` = false blanks the wall-time
    /// column so that output bytes are reproducible.
    pub fn write_csv<W: Write>(&self, mut out: W, with_wall: bool) -> Result<()> {
        writeln!(out, "{RECORD_HEADER}")?;
        for r in &self.rows {
            let wall = if with_wall { r.wall_ms.to_string() } else { String::new() };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.n,
                r.t,
                opt(&r.tau),
                opt(&r.r),
                r.energy,
                opt(&r.modified_energy),
                r.volume,
                opt(&r.iters),
                wall
            )?;
        }
        Ok(())
    }
}

/// `log(e_k/e_{k+1}) / log(τ_k/τ_{k+1})` for each adjacent refinement pair.
pub fn convergence_order(errors: &[f64], taus: &[f64]) -> Result<Vec<f64>> {
    if errors.len() != taus.len() {
        return Err(Error::InsufficientData(format!(
            "{} errors for {} step sizes",
            errors.len(),
            taus.len()
        )));
    }
    if errors.len() < 2 {
        return Err(Error::InsufficientData("need at least two refinement levels".into()));
    }
    errors
        .windows(2)
        .zip(taus.windows(2))
        .map(|(e, t)| {
            if t[0] == t[1] {
                return Err(Error::DegenerateRefinement(t[0]));
            }
            if !(e[0] > 0.0 && e[1] > 0.0 && t[0] > 0.0 && t[1] > 0.0) {
                return Err(Error::OutOfDomain(format!(
                    "errors and steps must be positive, got {e:?}, {t:?}"
                )));
            }
            Ok((e[0] / e[1]).ln() / (t[0] / t[1]).ln())
        })
        .collect()
}

/// Number of resampling points used by [`scaling_fit`].
pub const SCALING_SAMPLES: usize = 200;

/// Least-squares slope of `log E` against `log t` on `[t_lo, t_hi]`.
///
/// The data are first interpolated (linearly in log–log) onto
/// [`SCALING_SAMPLES`] points uniformly spaced in `log t`, so that densely
/// recorded stretches of an adaptive run do not dominate the fit.
pub fn scaling_fit(times: &[f64], values: &[f64], t_lo: f64, t_hi: f64) -> Result<f64> {
    if times.len() != values.len() {
        return Err(Error::InsufficientData("times and values differ in length".into()));
    }
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return Err(Error::OutOfDomain(format!("need 0 < t_lo < t_hi, got [{t_lo}, {t_hi}]")));
    }
    let tol = 1e-9 * t_hi;
    let covers = times.first().is_some_and(|&t| t <= t_lo + tol) && times.last().is_some_and(|&t| t >= t_hi - tol);
    if times.len() < 2 || !covers {
        return Err(Error::InsufficientData(format!("records do not cover [{t_lo}, {t_hi}]")));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::OutOfDomain("times must increase strictly".into()));
    }
    if values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::OutOfDomain("values must be positive for a log-log fit".into()));
    }
    let (a, b) = (t_lo.ln(), t_hi.ln());
    let k = SCALING_SAMPLES;
    let mut xs = Vec::with_capacity(k);
    let mut ys = Vec::with_capacity(k);
    let mut seg = 0;
    for i in 0..k {
        let x = a + (b - a) * i as f64 / (k - 1) as f64;
        let t = x.exp().clamp(times[0], times[times.len() - 1]);
        while seg + 2 < times.len() && times[seg + 1] < t {
            seg += 1;
        }
        let (t0, t1) = (times[seg].ln(), times[seg + 1].ln());
        let (v0, v1) = (values[seg].ln(), values[seg + 1].ln());
        let w = ((t.ln() - t0) / (t1 - t0)).clamp(0.0, 1.0);
        xs.push(x);
        ys.push(v0 + w * (v1 - v0));
    }
    let n = k as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

//! Time-stepping schemes for `∂_t φ = κ Δ μ`, `μ = φ³ − φ − ε² Δ φ`.
//!
//! Every implicit step is reduced to one nonlinear system
//!
//! ```text
//! c·X − κ Δ_h ( G(X) − w ε² Δ_h X ) = known
//! ```
//!
//! where `G` gathers the local (non-differential) part of the chemical
//! potential with all its weights and `known` holds history, explicit terms and
//! forcing. [`Problem::solve`] iterates
//!
//! ```text
//! (c + κ w ε² k⁴ + κ s k²) X̂^{m+1} = known̂ − κ k² (G(X^m) − s X^m)^
//! ```
//!
//! with a scalar shift `s` placed at the centre of the range of `G′` so the
//! lagged part is as small as possible. The range depends on the magnitude of
//! the iterate, so the shift is re-centred whenever the iterate outgrows the
//! magnitude it was computed for. The shift only changes the iteration, never
//! the solution.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, SpectralField};
use crate::kernels::bdf2_coeffs;

/// `α = (2 − √2)/2` of the L-stable two-stage SDIRK method.
pub const SDIRK_ALPHA: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;

/// `γ = 2 − √2` of the L-stable TR-BDF2 split.
pub const TR_BDF2_GAMMA: f64 = 2.0 - std::f64::consts::SQRT_2;

/// Accepted defect of a converged iterate, in units of the update tolerance.
pub const DEFECT_FACTOR: f64 = 10.0;

/// The shift is re-centred once the iterate exceeds this multiple of the
/// magnitude it was computed for.
const RECENTRE_FACTOR: f64 = 1.05;

/// Parameters of one Cahn–Hilliard instance on `(0, L)²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Mobility `κ`.
    pub kappa: f64,
    /// Interface width `ε`.
    pub epsilon: f64,
    /// Domain side `L`.
    pub length: f64,
    /// Grid points per direction `M`.
    pub grid_size: usize,
}

impl ModelParams {
    pub fn new(kappa: f64, epsilon: f64, length: f64, grid_size: usize) -> Result<Self> {
        let p = Self {
            kappa,
            epsilon,
            length,
            grid_size,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.grid_size % 2 != 0 || self.grid_size < 4 {
            return Err(Error::Config(format!(
                "grid size must be even and at least 4, got {}",
                self.grid_size
            )));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Config(format!("length must be positive, got {}", self.length)));
        }
        Ok(())
    }

    pub fn eps2(&self) -> f64 {
        self.epsilon * self.epsilon
    }
}

/// Termination rule of the nonlinear iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    /// Bound on `‖X^{m+1} − X^m‖_∞`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 500,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(Error::Config(format!(
                "fixed-point tolerance must be positive and max_iters ≥ 1, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// A source term `g(t)` added to the right-hand side of the equation.
pub trait Forcing: Send + Sync {
    fn at(&self, problem: &Problem, t: f64) -> Field;
}

/// `Φ(x, y, t) = cos t · sin x · sin y` with the source that makes it an exact
/// solution of the semi-discrete problem.
///
/// The source is built from the discrete operators applied to the grid
/// interpolant, `g = ∂_t Φ − κ Δ_h (Φ³ − Φ − ε² Δ_h Φ)`, so the spatial
/// discretisation contributes no error.
#[derive(Clone, Copy, Debug, Default)]
pub struct ManufacturedSolution;

impl ManufacturedSolution {
    pub fn exact(&self, grid: &Grid, t: f64) -> Field {
        let c = t.cos();
        grid.field_from_fn(|x, y| c * x.sin() * y.sin())
    }
}

impl Forcing for ManufacturedSolution {
    fn at(&self, problem: &Problem, t: f64) -> Field {
        let grid = problem.grid();
        let phi = self.exact(grid, t);
        let s = -t.sin();
        let dphi = grid.field_from_fn(|x, y| s * x.sin() * y.sin());
        let flux = problem.flux(&phi);
        dphi.lincomb(1.0, &flux, -1.0)
    }
}

/// One instance of the equation: parameters, grid, optional source.
#[derive(Clone)]
pub struct Problem {
    params: ModelParams,
    grid: Grid,
    forcing: Option<Arc<dyn Forcing>>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("params", &self.params)
            .field("forced", &self.forcing.is_some())
            .finish()
    }
}

/// `c·X − κΔ_h(G(X) − wε²Δ_h X) = known`.
pub struct ImplicitSystem<'a> {
    /// Coefficient of the unknown on the time-derivative side.
    pub c: f64,
    /// Weight of the implicit `−ε²Δ_h X` part of the chemical potential.
    pub weight: f64,
    pub known: Field,
    /// Local part `G` of the chemical potential; `None` makes the system linear.
    pub nonlinear: Option<&'a dyn Fn(&Field) -> Field>,
    /// Shift moved from `G` into the diagonal operator; ideally the midpoint
    /// of the range of `G′`.
    pub shift: Shift,
}

/// Shift `s(m) = a·m² + b` as a function of the largest magnitude `m` of the
/// arguments of `G`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shift {
    pub quadratic: f64,
    pub constant: f64,
    /// Magnitude of the known arguments (e.g. `max |φⁿ⁻¹|`); the solver only
    /// ever raises it.
    pub magnitude: f64,
}

impl Shift {
    /// A constant shift.
    pub fn fixed(s: f64) -> Self {
        Self {
            quadratic: 0.0,
            constant: s,
            magnitude: 0.0,
        }
    }

    pub fn at(&self, m: f64) -> f64 {
        self.quadratic * m * m + self.constant
    }
}

/// History needed by the two-level schemes at level `n`.
#[derive(Clone, Debug)]
pub struct SolverState {
    /// `φⁿ⁻¹`.
    pub phi_prev: Field,
    /// `φⁿ⁻²`, absent before level 2.
    pub phi_prev2: Option<Field>,
    /// `τ_{n−1}`, absent before level 2.
    pub tau_prev: Option<f64>,
    /// `τ_n`.
    pub tau_cur: f64,
    /// `t_{n−1}`.
    pub time_prev: f64,
    /// `n`.
    pub level: usize,
}

impl SolverState {
    pub fn time_cur(&self) -> f64 {
        self.time_prev + self.tau_cur
    }

    fn history(&self) -> Result<(&Field, f64)> {
        match (&self.phi_prev2, self.tau_prev) {
            (Some(q), Some(t)) if self.level >= 2 => Ok((q, t)),
            _ => Err(Error::Config(format!(
                "two-level scheme at level {} needs φⁿ⁻² and τ_(n-1)",
                self.level
            ))),
        }
    }
}

/// Result of one implicit solve.
#[derive(Clone, Debug)]
pub struct Step {
    pub phi: Field,
    pub iterations: usize,
}

fn cubic_minus_linear(weight: f64) -> impl Fn(&Field) -> Field {
    move |x: &Field| x.map(|v| weight * (v * v * v - v))
}

/// Midpoint of the range of `d/dX [a(X³ − X)]` for `|X| ≤ m`.
fn cubic_shift(weight: f64, m: f64) -> Shift {
    Shift {
        quadratic: 1.5 * weight,
        constant: -weight,
        magnitude: m,
    }
}

impl Problem {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            grid: Grid::new(params.length, params.grid_size)?,
            params,
            forcing: None,
        })
    }

    pub fn with_forcing(mut self, forcing: Arc<dyn Forcing>) -> Self {
        self.forcing = Some(forcing);
        self
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_forced(&self) -> bool {
        self.forcing.is_some()
    }

    /// `g(t)`, or zero when the problem is unforced.
    pub fn forcing_at(&self, t: f64) -> Option<Field> {
        self.forcing.as_ref().map(|f| f.at(self, t))
    }

    fn add_forcing(&self, rhs: &mut Field, t: f64, weight: f64) {
        if let Some(g) = self.forcing_at(t) {
            rhs.axpy(weight, &g);
        }
    }

    /// `μ = φ³ − φ − ε² Δ_h φ`.
    pub fn chemical_potential(&self, phi: &Field) -> Field {
        let lap = self.grid.laplacian(phi);
        let eps2 = self.params.eps2();
        phi.zip_map(&lap, |v, l| v * v * v - v - eps2 * l)
    }

    /// `κ Δ_h μ(φ)`.
    pub fn flux(&self, phi: &Field) -> Field {
        self.grid.laplacian(&self.chemical_potential(phi)).scaled(self.params.kappa)
    }

    fn operator_symbol(&self, sys: &ImplicitSystem<'_>, shift: f64) -> Vec<f64> {
        let kappa = self.params.kappa;
        let weps = sys.weight * self.params.eps2();
        self.grid
            .ksq()
            .iter()
            .map(|&k2| sys.c + kappa * (weps * k2 * k2 + shift * k2))
            .collect()
    }

    /// Keeps the diagonal operator bounded away from zero: a negative shift
    /// must satisfy `κ s² / (4 w ε²) ≤ c / 2`.
    fn admissible_shift(&self, sys: &ImplicitSystem<'_>, m: f64) -> f64 {
        let shift = sys.shift.at(m);
        if shift >= 0.0 {
            return shift;
        }
        let weps = sys.weight * self.params.eps2();
        let floor = -(2.0 * sys.c * weps / self.params.kappa).sqrt();
        shift.max(floor)
    }

    /// Fixed-point solve of an [`ImplicitSystem`] starting from `guess`.
    ///
    /// An iterate is accepted once the max-norm update that produced it is at
    /// most `cfg.tol` and its defect in the system is at most
    /// `DEFECT_FACTOR · cfg.tol` (or has stopped decreasing, i.e. reached the
    /// roundoff floor). The defect of `X^{m+1}` is
    /// `κ k² (N̂(X^{m+1}) − N̂(X^m))` with `N = G − s·id`, so checking it costs
    /// one extra inverse transform. `iterations` counts linear solves.
    pub fn solve(&self, sys: &ImplicitSystem<'_>, guess: &Field, cfg: &FixedPointConfig) -> Result<Step> {
        cfg.validate()?;
        if !(sys.c > 0.0) || !(sys.weight > 0.0) {
            return Err(Error::Config(format!(
                "implicit system needs c > 0 and w > 0, got c = {}, w = {}",
                sys.c, sys.weight
            )));
        }
        let grid = &self.grid;
        let kappa = self.params.kappa;
        let known_hat = grid.forward(&sys.known);
        let Some(nonlinear) = sys.nonlinear else {
            let symbol = self.operator_symbol(sys, 0.0);
            let mut x = known_hat;
            grid.scale_spectral(&mut x, |idx| 1.0 / symbol[idx]);
            return Ok(Step {
                phi: grid.inverse(&x),
                iterations: 1,
            });
        };
        let mut magnitude = sys.shift.magnitude.max(guess.max_abs());
        let mut shift = self.admissible_shift(sys, magnitude);
        let mut symbol = self.operator_symbol(sys, shift);
        let ksq = grid.ksq();

        let mut x = guess.clone();
        let mut update = f64::INFINITY;
        let mut prev_lag: Option<SpectralField> = None;
        let mut prev_defect = f64::INFINITY;
        for it in 0..=cfg.max_iters {
            let lag = grid.forward(&nonlinear(&x).lincomb(1.0, &x, -shift));
            if update <= cfg.tol {
                if let Some(prev) = &prev_lag {
                    let mut diff = lag.clone();
                    for (idx, (d, p)) in diff.coeffs_mut().iter_mut().zip(prev.coeffs()).enumerate() {
                        *d = (*d - *p) * (kappa * ksq[idx]);
                    }
                    let defect = grid.inverse(&diff).max_abs();
                    if defect <= DEFECT_FACTOR * cfg.tol || defect >= prev_defect {
                        return Ok(Step { phi: x, iterations: it });
                    }
                    prev_defect = defect;
                }
            }
            if it == cfg.max_iters {
                break;
            }
            let mut next_hat = lag.clone();
            for (idx, (c, k)) in next_hat.coeffs_mut().iter_mut().zip(known_hat.coeffs()).enumerate() {
                *c = (*k - *c * (kappa * ksq[idx])) / symbol[idx];
            }
            let next = grid.inverse(&next_hat);
            update = next.max_abs_diff(&x);
            x = next;
            prev_lag = Some(lag);
            if !update.is_finite() || update > 1e8 {
                break;
            }
            let m = x.max_abs();
            if sys.shift.quadratic > 0.0 && m > RECENTRE_FACTOR * magnitude {
                // Defects are only comparable between lags with equal shifts.
                magnitude = m;
                shift = self.admissible_shift(sys, magnitude);
                symbol = self.operator_symbol(sys, shift);
                prev_lag = None;
                prev_defect = f64::INFINITY;
            }
        }
        Err(Error::FixedPointDiverged {
            iterations: cfg.max_iters,
            update,
        })
    }

    /// `c·X − κΔ_h(G(X) − wε²Δ_h X) − known`.
    pub fn residual(&self, sys: &ImplicitSystem<'_>, x: &Field) -> Field {
        let eps2 = self.params.eps2();
        let lap = self.grid.laplacian(x);
        let mut mu = lap.scaled(-sys.weight * eps2);
        if let Some(g) = sys.nonlinear {
            mu.axpy(1.0, &g(x));
        }
        let flux = self.grid.laplacian(&mu).scaled(self.params.kappa);
        let mut r = x.scaled(sys.c);
        r.axpy(-1.0, &flux);
        r.axpy(-1.0, &sys.known);
        r
    }

    fn bdf2_system<'a>(
        &self,
        state: &SolverState,
        nonlinear: &'a dyn Fn(&Field) -> Field,
    ) -> Result<ImplicitSystem<'a>> {
        let (q, tau_prev) = state.history()?;
        let (b0, b1) = bdf2_coeffs(tau_prev, state.tau_cur)?;
        let p = &state.phi_prev;
        // b0 (X − p) + b1 (p − q) = κΔμ(X) + g
        let mut known = p.lincomb(b0 - b1, q, b1);
        self.add_forcing(&mut known, state.time_cur(), 1.0);
        Ok(ImplicitSystem {
            c: b0,
            weight: 1.0,
            known,
            nonlinear: Some(nonlinear),
            shift: cubic_shift(1.0, p.max_abs()),
        })
    }

    /// Variable-step BDF2 step `D₂φⁿ = κΔ_h μⁿ (+ gⁿ)`.
    pub fn bdf2_step(&self, state: &SolverState, cfg: &FixedPointConfig) -> Result<Step> {
        let g = cubic_minus_linear(1.0);
        let sys = self.bdf2_system(state, &g)?;
        self.solve(&sys, &state.phi_prev, cfg)
    }

    /// Max-norm defect of `phi` in the BDF2 equation for `state`.
    pub fn bdf2_defect(&self, state: &SolverState, phi: &Field) -> Result<f64> {
        let g = cubic_minus_linear(1.0);
        let sys = self.bdf2_system(state, &g)?;
        Ok(self.residual(&sys, phi).max_abs())
    }

    /// Backward Euler from `(t0, φ⁰)` over `τ`.
    pub fn bdf1_step(&self, phi0: &Field, t0: f64, tau: f64, cfg: &FixedPointConfig) -> Result<Step> {
        check_step(tau)?;
        let mut known = phi0.scaled(1.0 / tau);
        self.add_forcing(&mut known, t0 + tau, 1.0);
        let g = cubic_minus_linear(1.0);
        let sys = ImplicitSystem {
            c: 1.0 / tau,
            weight: 1.0,
            known,
            nonlinear: Some(&g),
            shift: cubic_shift(1.0, phi0.max_abs()),
        };
        self.solve(&sys, phi0, cfg)
    }

    /// Trapezoidal rule `(X − φ⁰)/τ = ½κΔμ(X) + ½κΔμ(φ⁰)`.
    pub fn trapezoidal_step(&self, phi0: &Field, t0: f64, tau: f64, cfg: &FixedPointConfig) -> Result<Step> {
        check_step(tau)?;
        let mut known = phi0.scaled(1.0 / tau);
        known.axpy(0.5, &self.flux(phi0));
        self.add_forcing(&mut known, t0, 0.5);
        self.add_forcing(&mut known, t0 + tau, 0.5);
        let g = cubic_minus_linear(0.5);
        let sys = ImplicitSystem {
            c: 1.0 / tau,
            weight: 0.5,
            known,
            nonlinear: Some(&g),
            shift: cubic_shift(0.5, phi0.max_abs()),
        };
        self.solve(&sys, phi0, cfg)
    }

    /// TR-BDF2 start: a trapezoidal substep over `τ₁` followed by a BDF2
    /// substep over `τ₂`. With `τ₂/τ₁ = √2/2` the pair is the L-stable
    /// TR-BDF2 method with `γ = τ₁/(τ₁+τ₂) = 2 − √2`.
    pub fn tr_bdf2_start(
        &self,
        phi0: &Field,
        t0: f64,
        tau1: f64,
        tau2: f64,
        cfg: &FixedPointConfig,
    ) -> Result<(Step, Step)> {
        check_step(tau2)?;
        let first = self.trapezoidal_step(phi0, t0, tau1, cfg)?;
        let state = SolverState {
            phi_prev: first.phi.clone(),
            phi_prev2: Some(phi0.clone()),
            tau_prev: Some(tau1),
            tau_cur: tau2,
            time_prev: t0 + tau1,
            level: 2,
        };
        let second = self.bdf2_step(&state, cfg)?;
        Ok((first, second))
    }

    /// Two-stage L-stable SDIRK method with `α = (2 − √2)/2`.
    pub fn sdirk2_start(&self, phi0: &Field, t0: f64, tau: f64, cfg: &FixedPointConfig) -> Result<Step> {
        check_step(tau)?;
        let a = SDIRK_ALPHA;
        let stage = self.bdf1_step(phi0, t0, a * tau, cfg)?;

        let mut known = phi0.scaled(1.0 / tau);
        known.axpy(1.0 - a, &self.flux(&stage.phi));
        self.add_forcing(&mut known, t0 + a * tau, 1.0 - a);
        self.add_forcing(&mut known, t0 + tau, a);
        let g = cubic_minus_linear(a);
        let sys = ImplicitSystem {
            c: 1.0 / tau,
            weight: a,
            known,
            nonlinear: Some(&g),
            shift: cubic_shift(a, stage.phi.max_abs()),
        };
        let last = self.solve(&sys, &stage.phi, cfg)?;
        Ok(Step {
            phi: last.phi,
            iterations: stage.iterations + last.iterations,
        })
    }

    /// Crank–Nicolson step `∂_τ φⁿ = κΔ_h μ^{n−½}` with
    /// `μ^{n−½} = ½[(φⁿ)² + (φⁿ⁻¹)²] φ^{n−½} − φ^{n−½} − ε² Δ_h φ^{n−½}`.
    pub fn cn_step(&self, state: &SolverState, cfg: &FixedPointConfig) -> Result<Step> {
        let tau = state.tau_cur;
        check_step(tau)?;
        let p = &state.phi_prev;
        let eps2 = self.params.eps2();
        let mut known = p.scaled(1.0 / tau);
        let explicit = self.grid.laplacian(&self.grid.laplacian(p)).scaled(-0.5 * eps2 * self.params.kappa);
        known.axpy(1.0, &explicit);
        self.add_forcing(&mut known, state.time_prev, 0.5);
        self.add_forcing(&mut known, state.time_cur(), 0.5);
        let g = |x: &Field| {
            x.zip_map(p, |a, b| {
                let mid = 0.5 * (a + b);
                0.5 * (a * a + b * b) * mid - mid
            })
        };
        let m = p.max_abs();
        let sys = ImplicitSystem {
            c: 1.0 / tau,
            weight: 0.5,
            known,
            nonlinear: Some(&g),
            shift: Shift {
                quadratic: 0.75,
                constant: -0.5,
                magnitude: m,
            },
        };
        self.solve(&sys, p, cfg)
    }

    /// Crank–Nicolson convex-splitting step with
    /// `μ̂ = ½[(φⁿ)² + (φⁿ⁻¹)²] φ^{n−½} − φ̌ − ε² Δ_h φ̂`,
    /// `φ̂ = (3φⁿ + φⁿ⁻²)/4`, `φ̌ = (3φⁿ⁻¹ − φⁿ⁻²)/2`.
    pub fn cncs_step(&self, state: &SolverState, cfg: &FixedPointConfig) -> Result<Step> {
        let tau = state.tau_cur;
        check_step(tau)?;
        let (q, _) = state.history()?;
        let p = &state.phi_prev;
        let eps2 = self.params.eps2();
        let mut known = p.scaled(1.0 / tau);
        let explicit = self.grid.laplacian(&self.grid.laplacian(q)).scaled(-0.25 * eps2 * self.params.kappa);
        known.axpy(1.0, &explicit);
        self.add_forcing(&mut known, state.time_prev, 0.5);
        self.add_forcing(&mut known, state.time_cur(), 0.5);
        let check = p.lincomb(1.5, q, -0.5);
        let g = |x: &Field| {
            let mut out = x.zip_map(p, |a, b| 0.25 * (a * a + b * b) * (a + b));
            out.axpy(-1.0, &check);
            out
        };
        let m = p.max_abs();
        let sys = ImplicitSystem {
            c: 1.0 / tau,
            weight: 0.75,
            known,
            nonlinear: Some(&g),
            shift: Shift {
                quadratic: 0.75,
                constant: 0.0,
                magnitude: m,
            },
        };
        self.solve(&sys, p, cfg)
    }

    /// First-order convex splitting `(X − φ⁰)/τ = κΔ_h(X³ − φ⁰ − ε²Δ_h X)`.
    pub fn convex_splitting_first_step(
        &self,
        phi0: &Field,
        t0: f64,
        tau: f64,
        cfg: &FixedPointConfig,
    ) -> Result<Step> {
        check_step(tau)?;
        let mut known = phi0.scaled(1.0 / tau);
        self.add_forcing(&mut known, t0 + tau, 1.0);
        let g = |x: &Field| x.zip_map(phi0, |a, b| a * a * a - b);
        let m = phi0.max_abs();
        let sys = ImplicitSystem {
            c: 1.0 / tau,
            weight: 1.0,
            known,
            nonlinear: Some(&g),
            shift: Shift {
                quadratic: 1.5,
                constant: 0.0,
                magnitude: m,
            },
        };
        self.solve(&sys, phi0, cfg)
    }
}

fn check_step(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositiveStep(tau));
    }
    Ok(())
}

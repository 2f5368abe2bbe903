//! Variable-step BDF2 convolution kernels, their discrete orthogonal
//! convolution (DOC) kernels, and the step-ratio stability machinery built on
//! top of them.
//!
//! For a mesh `t_0 < t_1 < … < t_N` with steps `τ_k = t_k − t_{k−1}` and ratios
//! `r_k = τ_k / τ_{k−1}`, the BDF2 difference quotient is the two-term
//! convolution `D₂vⁿ = b₀⁽ⁿ⁾ ∇vⁿ + b₁⁽ⁿ⁾ ∇vⁿ⁻¹`. The DOC kernels `θ_{n−j}^{(n)}`
//! invert it: `Σ_{j=k}^{n} θ_{n−j}^{(n)} b_{j−k}^{(j)} = δ_{nk}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tridiag::SymTridiagonal;

/// Largest matrix order accepted by [`certify_mesh`].
pub const MAX_CERTIFY_LEVELS: usize = 10_000;

/// Slack for floating-point comparisons against the analytic bounds.
const BOUND_SLACK: f64 = 1e-10;

/// Strictly increasing time levels `t_0 < … < t_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMesh {
    levels: Vec<f64>,
}

impl TimeMesh {
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::OutOfDomain("a mesh needs at least two levels".into()));
        }
        for w in levels.windows(2) {
            let tau = w[1] - w[0];
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::NonPositiveStep(tau));
            }
        }
        Ok(Self { levels })
    }

    /// Builds `t_k = t_0 + Σ_{i≤k} τ_i`.
    pub fn from_steps(start: f64, steps: &[f64]) -> Result<Self> {
        let mut levels = Vec::with_capacity(steps.len() + 1);
        let mut t = start;
        levels.push(t);
        for &tau in steps {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::NonPositiveStep(tau));
            }
            t += tau;
            levels.push(t);
        }
        Self::from_levels(levels)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Number of steps `N`.
    pub fn num_steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        *self.levels.last().expect("non-empty mesh")
    }

    /// `τ_k` for `1 ≤ k ≤ N`.
    pub fn step(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.num_steps(), "step index {k} out of range");
        self.levels[k] - self.levels[k - 1]
    }

    pub fn steps(&self) -> Vec<f64> {
        self.levels.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `r_k = τ_k / τ_{k−1}` for `2 ≤ k ≤ N`.
    pub fn ratio(&self, k: usize) -> f64 {
        assert!(k >= 2, "ratios start at k = 2");
        self.step(k) / self.step(k - 1)
    }

    /// `r_2, …, r_N`.
    pub fn ratios(&self) -> Vec<f64> {
        (2..=self.num_steps()).map(|k| self.ratio(k)).collect()
    }

    pub fn max_step(&self) -> f64 {
        self.steps().into_iter().fold(0.0, f64::max)
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios().into_iter().fold(0.0, f64::max)
    }

    /// Number of levels with `r_k ≥ threshold`.
    pub fn count_ratios_above(&self, threshold: f64) -> usize {
        self.ratios().into_iter().filter(|&r| r >= threshold).count()
    }

    /// The mesh truncated to `t_0, …, t_n`.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n < 1 || n > self.num_steps() {
            return Err(Error::OutOfDomain(format!("prefix length {n} out of range")));
        }
        Ok(Self {
            levels: self.levels[..=n].to_vec(),
        })
    }
}

/// `(b₀⁽ⁿ⁾, b₁⁽ⁿ⁾)` for consecutive steps `τ_{n−1}`, `τ_n`.
pub fn bdf2_coeffs(tau_prev: f64, tau_cur: f64) -> Result<(f64, f64)> {
    for tau in [tau_prev, tau_cur] {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::NonPositiveStep(tau));
        }
    }
    let r = tau_cur / tau_prev;
    Ok((
        (1.0 + 2.0 * r) / (tau_cur * (1.0 + r)),
        -r * r / (tau_cur * (1.0 + r)),
    ))
}

fn mesh_b0(mesh: &TimeMesh, n: usize) -> f64 {
    let r = mesh.ratio(n);
    (1.0 + 2.0 * r) / (mesh.step(n) * (1.0 + r))
}

fn mesh_b1(mesh: &TimeMesh, n: usize) -> f64 {
    let r = mesh.ratio(n);
    -r * r / (mesh.step(n) * (1.0 + r))
}

/// DOC kernels of level `n`, indexed by lag: element `n − j` is `θ_{n−j}^{(n)}`
/// for `j = n, n−1, …, 2`.
///
/// Uses the product form `θ_{n−j}^{(n)} = (1/b₀^{(j)}) ∏_{i=j+1}^{n} r_i²/(1+2r_i)`.
pub fn doc_kernels(mesh: &TimeMesh, n: usize) -> Result<Vec<f64>> {
    if n < 2 || n > mesh.num_steps() {
        return Err(Error::OutOfDomain(format!(
            "DOC kernels need 2 ≤ n ≤ {}, got {n}",
            mesh.num_steps()
        )));
    }
    let mut row = Vec::with_capacity(n - 1);
    let mut prod = 1.0;
    for j in (2..=n).rev() {
        row.push(prod / mesh_b0(mesh, j));
        let r = mesh.ratio(j);
        prod *= r * r / (1.0 + 2.0 * r);
    }
    Ok(row)
}

/// BDF2 and DOC kernels for every level `2 ≤ n ≤ N` of a mesh, with their
/// step-scaled (dimensionless) variants.
#[derive(Clone, Debug)]
pub struct KernelTable {
    steps: Vec<f64>,
    b0: Vec<f64>,
    b1: Vec<f64>,
    theta: Vec<Vec<f64>>,
}

impl KernelTable {
    pub fn new(mesh: &TimeMesh) -> Result<Self> {
        let n_max = mesh.num_steps();
        if n_max < 2 {
            return Err(Error::OutOfDomain("kernel table needs at least two steps".into()));
        }
        let theta = (2..=n_max)
            .map(|n| doc_kernels(mesh, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            steps: mesh.steps(),
            b0: (2..=n_max).map(|n| mesh_b0(mesh, n)).collect(),
            b1: (2..=n_max).map(|n| mesh_b1(mesh, n)).collect(),
            theta,
        })
    }

    /// Highest level `N`.
    pub fn levels(&self) -> usize {
        self.steps.len()
    }

    fn tau(&self, k: usize) -> f64 {
        self.steps[k - 1]
    }

    fn ratio(&self, k: usize) -> f64 {
        self.tau(k) / self.tau(k - 1)
    }

    pub fn b0(&self, n: usize) -> f64 {
        self.b0[n - 2]
    }

    pub fn b1(&self, n: usize) -> f64 {
        self.b1[n - 2]
    }

    /// `b_{n−k}^{(n)}` with the convention `b_j = 0` for `j ≥ 2`.
    pub fn b(&self, n: usize, k: usize) -> f64 {
        match n - k {
            0 => self.b0(n),
            1 => self.b1(n),
            _ => 0.0,
        }
    }

    /// `θ_{n−j}^{(n)}` for `2 ≤ j ≤ n`.
    pub fn theta(&self, n: usize, j: usize) -> f64 {
        self.theta[n - 2][n - j]
    }

    pub fn theta_row(&self, n: usize) -> &[f64] {
        &self.theta[n - 2]
    }

    /// `b̃₀^{(k)} = τ_k b₀^{(k)} = (1+2r_k)/(1+r_k)`.
    pub fn scaled_b0(&self, k: usize) -> f64 {
        let r = self.ratio(k);
        (1.0 + 2.0 * r) / (1.0 + r)
    }

    /// `b̃₁^{(k)} = −r_k^{3/2}/(1+r_k)`.
    pub fn scaled_b1(&self, k: usize) -> f64 {
        let r = self.ratio(k);
        -r.powf(1.5) / (1.0 + r)
    }

    /// `θ̃_{k−j}^{(k)} = θ_{k−j}^{(k)} / √(τ_k τ_j)`.
    pub fn scaled_theta(&self, k: usize, j: usize) -> f64 {
        self.theta(k, j) / (self.tau(k) * self.tau(j)).sqrt()
    }

    /// `Σ_{j=2}^{n} θ_{n−j}^{(n)}`.
    pub fn theta_row_sum(&self, n: usize) -> f64 {
        self.theta_row(n).iter().sum()
    }
}

/// Largest violation of both orthogonality identities over `2 ≤ k ≤ n ≤ N`:
/// `Σ_j θ_{n−j}^{(n)} b_{j−k}^{(j)} = δ_{nk}` and `Σ_j b_{m−j}^{(m)} θ_{j−k}^{(j)} = δ_{mk}`.
pub fn verify_orthogonality(mesh: &TimeMesh, n_max: usize) -> Result<f64> {
    if n_max < 2 || n_max > mesh.num_steps() {
        return Err(Error::OutOfDomain(format!(
            "orthogonality check needs 2 ≤ N ≤ {}, got {n_max}",
            mesh.num_steps()
        )));
    }
    let table = KernelTable::new(&mesh.prefix(n_max)?)?;
    let mut worst = 0.0f64;
    for n in 2..=n_max {
        for k in 2..=n {
            let delta = if n == k { 1.0 } else { 0.0 };
            // b_{j−k}^{(j)} vanishes unless j ∈ {k, k+1}.
            let mut left = table.theta(n, k) * table.b0(k);
            if k < n {
                left += table.theta(n, k + 1) * table.b1(k + 1);
            }
            // b_{n−j}^{(n)} vanishes unless j ∈ {n, n−1}.
            let mut right = table.b0(n) * table.theta(n, k);
            if k < n {
                right += table.b1(n) * table.theta(n - 1, k);
            }
            worst = worst.max((left - delta).abs()).max((right - delta).abs());
        }
    }
    Ok(worst)
}

/// Positive root of `1 + 2r − r^{3/2} = 0` (≈ 4.864).
pub fn r_star() -> f64 {
    let f = |r: f64| 1.0 + 2.0 * r - r.powf(1.5);
    let (mut lo, mut hi) = (4.0, 5.0);
    debug_assert!(f(lo) > 0.0 && f(hi) < 0.0);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn check_ratio_args(z: f64, s: f64) -> Result<()> {
    if !(z >= 0.0) || !(s >= 0.0) || !z.is_finite() || !s.is_finite() {
        return Err(Error::OutOfDomain(format!(
            "step-ratio arguments must be finite and nonnegative, got ({z}, {s})"
        )));
    }
    Ok(())
}

/// Lower Gerschgorin bound function
/// `R_L(z, s) = (2 + 4z − z^{3/2})/(1 + z) − s^{3/2}/(1 + s)`.
pub fn r_l(z: f64, s: f64) -> Result<f64> {
    check_ratio_args(z, s)?;
    Ok((2.0 + 4.0 * z - z.powf(1.5)) / (1.0 + z) - s.powf(1.5) / (1.0 + s))
}

/// Upper Gerschgorin bound function
/// `R_U(z, s) = (1+2z)(1+2z+z^{3/2})/(1+z)² + s^{3/2}(1+2s+s^{3/2})/(1+s)²`.
pub fn r_u(z: f64, s: f64) -> Result<f64> {
    check_ratio_args(z, s)?;
    let zp = z.powf(1.5);
    let sp = s.powf(1.5);
    Ok((1.0 + 2.0 * z) * (1.0 + 2.0 * z + zp) / (1.0 + z).powi(2)
        + sp * (1.0 + 2.0 * s + sp) / (1.0 + s).powi(2))
}

/// Ratio-independent bounds valid for every mesh with `0 < r_k ≤ r_user`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub r_user: f64,
    pub r_star: f64,
    /// Lower bound of `λ_min(B̃)`.
    pub m1: f64,
    /// Upper bound of `λ_max(B̃₂ᵀB̃₂)`.
    pub m2: f64,
    /// Upper bound of `λ_max(Θ̃)`.
    pub m3: f64,
}

pub fn stability_constants(r_user: f64) -> Result<StabilityConstants> {
    let rs = r_star();
    if !(r_user > 0.0 && r_user < rs) {
        return Err(Error::OutOfDomain(format!(
            "r_user must lie in (0, {rs:.6}), got {r_user}"
        )));
    }
    let m_star = r_user.powf(1.5) / (1.0 + 2.0 * r_user);
    Ok(StabilityConstants {
        r_user,
        r_star: rs,
        m1: 2.0 * (1.0 + 2.0 * r_user - r_user.powf(1.5)) / (1.0 + r_user),
        m2: r_u(r_user, r_user)?,
        m3: 2.0 / (1.0 - m_star),
    })
}

/// Eigenvalue certificate of the step-scaled BDF2 matrices of one mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    /// Order of `B̃₂` plus one, i.e. the highest level `n`.
    pub n: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub m1: f64,
    pub m2: f64,
    pub pass: bool,
    /// Gerschgorin lower bound of `B̃ = B̃₂ + B̃₂ᵀ`.
    pub gerschgorin_lower: f64,
    /// Gerschgorin upper bound of `B̃₂ᵀB̃₂`.
    pub gerschgorin_upper: f64,
    /// `min_k R_L(r_k, r_{k+1})` with `r_{n+1} := 0`.
    pub min_r_l: f64,
    /// `max_k R_U(r_k, r_{k+1})` with `r_{n+1} := 0`.
    pub max_r_u: f64,
}

fn check_ratio_cap(mesh: &TimeMesh, r_user: f64) -> Result<()> {
    for k in 2..=mesh.num_steps() {
        let ratio = mesh.ratio(k);
        if ratio > r_user * (1.0 + 1e-12) {
            return Err(Error::RatioExceedsUser {
                level: k,
                ratio,
                r_user,
            });
        }
    }
    Ok(())
}

/// `B̃ = B̃₂ + B̃₂ᵀ` and `B̃₂ᵀB̃₂`, both tridiagonal, for levels `2..=n`.
fn step_scaled_forms(mesh: &TimeMesh) -> (SymTridiagonal, SymTridiagonal) {
    let n = mesh.num_steps();
    let scaled = |k: usize| {
        let r = mesh.ratio(k);
        ((1.0 + 2.0 * r) / (1.0 + r), -r.powf(1.5) / (1.0 + r))
    };
    let d: Vec<(f64, f64)> = (2..=n).map(scaled).collect();
    let size = d.len();

    let sym_diag = d.iter().map(|&(b0, _)| 2.0 * b0).collect();
    let sym_off = d[1..].iter().map(|&(_, b1)| b1).collect();

    // B̃₂ is lower bidiagonal with diagonal b̃₀^{(k)} and subdiagonal b̃₁^{(k+1)}.
    let gram_diag = (0..size)
        .map(|i| d[i].0 * d[i].0 + if i + 1 < size { d[i + 1].1 * d[i + 1].1 } else { 0.0 })
        .collect();
    let gram_off = (0..size - 1).map(|i| d[i + 1].1 * d[i + 1].0).collect();

    (
        SymTridiagonal::new(sym_diag, sym_off),
        SymTridiagonal::new(gram_diag, gram_off),
    )
}

/// Extreme eigenvalues of the step-scaled kernel matrices compared against
/// `m1` and `m2`.
pub fn certify_mesh(mesh: &TimeMesh, constants: &StabilityConstants) -> Result<CertificationReport> {
    let n = mesh.num_steps();
    if n < 2 {
        return Err(Error::OutOfDomain("certification needs at least two steps".into()));
    }
    if n > MAX_CERTIFY_LEVELS {
        return Err(Error::OutOfDomain(format!(
            "certification is capped at {MAX_CERTIFY_LEVELS} levels, got {n}"
        )));
    }
    check_ratio_cap(mesh, constants.r_user)?;
    let (sym, gram) = step_scaled_forms(mesh);
    let lambda_min = sym.min_eigenvalue();
    let lambda_max = gram.max_eigenvalue();

    let next_ratio = |k: usize| if k < n { mesh.ratio(k + 1) } else { 0.0 };
    let mut min_r_l = f64::INFINITY;
    let mut max_r_u = f64::NEG_INFINITY;
    for k in 2..=n {
        min_r_l = min_r_l.min(r_l(mesh.ratio(k), next_ratio(k))?);
        max_r_u = max_r_u.max(r_u(mesh.ratio(k), next_ratio(k))?);
    }
    Ok(CertificationReport {
        n,
        lambda_min,
        lambda_max,
        m1: constants.m1,
        m2: constants.m2,
        pass: lambda_min >= constants.m1 - BOUND_SLACK && lambda_max <= constants.m2 + BOUND_SLACK,
        gerschgorin_lower: sym.gerschgorin().0,
        gerschgorin_upper: gram.gerschgorin().1,
        min_r_l,
        max_r_u,
    })
}

/// Outcome of randomized quadratic-form checks on one mesh.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trials: usize,
    /// `wᵀBw ≥ Σ R_L(r_k, r_{k+1}) w_k²/τ_k` failures.
    pub positivity_violations: usize,
    /// `(m1/m2)‖Λ_τ w‖² ≤ wᵀΘw` failures.
    pub lower_violations: usize,
    /// `wᵀΘw ≤ m3‖Λ_τ w‖²` failures.
    pub upper_violations: usize,
    /// Young-type bound failures, counted over all trials and ε ∈ {0.5, 1, 2}.
    pub young_violations: usize,
    /// Smallest observed `wᵀΘw / ‖Λ_τ w‖²`.
    pub min_theta_ratio: f64,
    /// Largest observed `wᵀΘw / ‖Λ_τ w‖²`.
    pub max_theta_ratio: f64,
}

impl ProbeReport {
    pub fn violations(&self) -> usize {
        self.positivity_violations + self.lower_violations + self.upper_violations + self.young_violations
    }
}

/// Quadratic forms over sequences indexed by levels `2..=n`.
pub(crate) struct QuadraticForms<'a> {
    table: &'a KernelTable,
}

impl<'a> QuadraticForms<'a> {
    pub(crate) fn new(table: &'a KernelTable) -> Self {
        Self { table }
    }

    fn n(&self) -> usize {
        self.table.levels()
    }

    /// `wᵀBw = 2 Σ_k w_k Σ_{j=2}^{k} b_{k−j}^{(k)} w_j`; `w[i]` is level `i + 2`.
    pub(crate) fn bdf2(&self, w: &[f64]) -> f64 {
        let t = self.table;
        (2..=self.n())
            .map(|k| {
                let i = k - 2;
                let mut conv = t.b0(k) * w[i];
                if k > 2 {
                    conv += t.b1(k) * w[i - 1];
                }
                2.0 * w[i] * conv
            })
            .sum()
    }

    /// `Σ_k w_k Σ_{j=2}^{k} θ_{k−j}^{(k)} v_j`.
    pub(crate) fn doc_bilinear(&self, w: &[f64], v: &[f64]) -> f64 {
        let t = self.table;
        (2..=self.n())
            .map(|k| {
                let conv: f64 = (2..=k).map(|j| t.theta(k, j) * v[j - 2]).sum();
                w[k - 2] * conv
            })
            .sum()
    }

    /// `Σ_k τ_k w_k² = ‖Λ_τ w‖²`.
    pub(crate) fn step_weighted(&self, w: &[f64]) -> f64 {
        (2..=self.n()).map(|k| self.table.tau(k) * w[k - 2] * w[k - 2]).sum()
    }
}

/// Randomized checks of the kernel quadratic-form inequalities on one mesh.
///
/// Each trial draws `w, v` uniformly from `[−1, 1]^{n−1}` and checks
/// positivity of the BDF2 kernels, the two-sided `Θ` bound, and the
/// Young-type convolution bound for ε ∈ {0.5, 1, 2}.
pub fn quadratic_form_probes(
    mesh: &TimeMesh,
    constants: &StabilityConstants,
    trials: usize,
    seed: u64,
) -> Result<ProbeReport> {
    check_ratio_cap(mesh, constants.r_user)?;
    let table = KernelTable::new(mesh)?;
    let forms = QuadraticForms::new(&table);
    let n = table.levels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ProbeReport {
        trials,
        min_theta_ratio: f64::INFINITY,
        max_theta_ratio: f64::NEG_INFINITY,
        ..Default::default()
    };
    let rl_weights: Vec<f64> = (2..=n)
        .map(|k| {
            let s = if k < n { mesh.ratio(k + 1) } else { 0.0 };
            r_l(mesh.ratio(k), s).map(|rl| rl / mesh.step(k))
        })
        .collect::<Result<_>>()?;
    let rel = 1e-12;

    for _ in 0..trials {
        let w: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let v: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..=1.0)).collect();

        let lhs = forms.bdf2(&w);
        let rhs: f64 = rl_weights.iter().zip(&w).map(|(c, x)| c * x * x).sum();
        if lhs < rhs - rel * (lhs.abs() + rhs.abs()) {
            report.positivity_violations += 1;
        }

        let quad = 2.0 * forms.doc_bilinear(&w, &w);
        let weighted = forms.step_weighted(&w);
        if weighted > 0.0 {
            let ratio = quad / weighted;
            report.min_theta_ratio = report.min_theta_ratio.min(ratio);
            report.max_theta_ratio = report.max_theta_ratio.max(ratio);
        }
        let lower = constants.m1 / constants.m2 * weighted;
        let upper = constants.m3 * weighted;
        if quad < lower - rel * lower.abs() {
            report.lower_violations += 1;
        }
        if quad > upper + rel * upper.abs() {
            report.upper_violations += 1;
        }

        let cross = forms.doc_bilinear(&w, &v);
        let vv = forms.doc_bilinear(&v, &v);
        for eps in [0.5, 1.0, 2.0] {
            let bound = eps * vv + weighted / (2.0 * constants.m1 * eps);
            if cross > bound + rel * (cross.abs() + bound.abs()) {
                report.young_violations += 1;
            }
        }
    }
    Ok(report)
}

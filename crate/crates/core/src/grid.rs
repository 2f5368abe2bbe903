//! Periodic square grid with Fourier pseudo-spectral operators.
//!
//! Grid functions live on `Ω_h = {(ih, jh) : 0 ≤ i, j < M}` of the square
//! `(0, L)²` and are stored row-major with `x` fastest: `values[j * M + i]`.
//! Spectral coefficients are the interpolation coefficients `ṽ_{ℓ,m}` of the
//! trigonometric interpolant, i.e. the DFT divided by `M²`, stored in FFT
//! order with the `x` wavenumber slowest: `coeffs[ℓq * M + mq]`.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Relative tolerance on the mean of arguments to `(-Δ_h)^{-γ}`.
pub const ZERO_MEAN_TOL: f64 = 1e-10;

/// Real grid function.
#[derive(Clone, PartialEq)]
pub struct Field {
    size: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("size", &self.size)
            .field("max_abs", &self.max_abs())
            .finish()
    }
}

impl Field {
    pub fn zeros(size: usize) -> Self {
        Self::constant(size, 0.0)
    }

    pub fn constant(size: usize, value: f64) -> Self {
        Self {
            size,
            values: vec![value; size * size],
        }
    }

    /// Wraps raw values laid out as `values[j * size + i]`.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::InvalidGrid(format!(
                "expected {} values for a {size}x{size} grid, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.size + i]
    }

    /// Values along the row `y = j h`.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.size..(j + 1) * self.size]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            size: self.size,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        assert_eq!(self.size, other.size, "grid size mismatch");
        Field {
            size: self.size,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Linear combination `a·self + b·other`.
    pub fn lincomb(&self, a: f64, other: &Field, b: f64) -> Field {
        self.zip_map(other, |u, v| a * u + b * v)
    }

    pub fn scaled(&self, a: f64) -> Field {
        self.map(|v| a * v)
    }

    /// `self += a·other`.
    pub fn axpy(&mut self, a: f64, other: &Field) {
        assert_eq!(self.size, other.size, "grid size mismatch");
        for (u, &v) in self.values.iter_mut().zip(&other.values) {
            *u += a * v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        assert_eq!(self.size, other.size, "grid size mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Complex pseudo-spectral coefficients of a grid function.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    size: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient of `e^{iν(ℓx + my)}` for `-M/2 ≤ ℓ, m < M/2`.
    pub fn coeff(&self, l: i64, m: i64) -> Complex64 {
        let n = self.size as i64;
        let lq = l.rem_euclid(n) as usize;
        let mq = m.rem_euclid(n) as usize;
        self.coeffs[lq * self.size + mq]
    }
}

/// Uniform periodic grid on `(0, L)²` with cached FFT plans and wavenumbers.
#[derive(Clone)]
pub struct Grid {
    length: f64,
    size: usize,
    spacing: f64,
    wavenumbers: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// `ν²(ℓ² + m²)` in spectral layout.
    ksq: Vec<f64>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("length", &self.length)
            .field("size", &self.size)
            .finish()
    }
}

impl Grid {
    pub fn new(length: f64, size: usize) -> Result<Self> {
        if size < 4 || size % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "grid size must be even and at least 4, got {size}"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "domain length must be positive, got {length}"
            )));
        }
        let nu = 2.0 * std::f64::consts::PI / length;
        let wavenumbers: Vec<f64> = (0..size).map(|q| nu * mode_index(q, size) as f64).collect();
        let ksq = (0..size * size)
            .map(|idx| {
                let (kx, ky) = (wavenumbers[idx / size], wavenumbers[idx % size]);
                kx * kx + ky * ky
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            length,
            size,
            spacing: length / size as f64,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
            wavenumbers,
            ksq,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// `ν·ℓ` for each FFT index `q`, with `ℓ = q` below `M/2` and `q − M` above.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// `ν²(ℓ² + m²)` for every coefficient in spectral layout.
    pub fn ksq(&self) -> &[f64] {
        &self.ksq
    }

    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.spacing
    }

    pub fn field_from_fn(&self, f: impl Fn(f64, f64) -> f64) -> Field {
        let n = self.size;
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            let y = self.coord(j);
            for i in 0..n {
                values.push(f(self.coord(i), y));
            }
        }
        Field { size: n, values }
    }

    fn check(&self, v: &Field) {
        assert_eq!(v.size, self.size, "field defined on a different grid");
    }

    pub fn forward(&self, v: &Field) -> SpectralField {
        self.check(v);
        let n = self.size;
        let mut buf: Vec<Complex64> = v.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut tmp = vec![Complex64::default(); n * n];
        self.forward.process(&mut buf);
        transpose(&buf, &mut tmp, n);
        self.forward.process(&mut tmp);
        let scale = 1.0 / (n * n) as f64;
        tmp.iter_mut().for_each(|c| *c *= scale);
        SpectralField { size: n, coeffs: tmp }
    }

    /// Real part of the interpolant evaluated on the grid.
    pub fn inverse(&self, s: &SpectralField) -> Field {
        assert_eq!(s.size, self.size, "coefficients from a different grid");
        let n = self.size;
        let mut buf = s.coeffs.clone();
        let mut tmp = vec![Complex64::default(); n * n];
        self.inverse.process(&mut buf);
        transpose(&buf, &mut tmp, n);
        self.inverse.process(&mut tmp);
        Field {
            size: n,
            values: tmp.into_iter().map(|c| c.re).collect(),
        }
    }

    /// Multiplies every coefficient by `symbol(idx)` in place.
    pub(crate) fn scale_spectral(&self, s: &mut SpectralField, symbol: impl Fn(usize) -> f64) {
        s.coeffs
            .iter_mut()
            .enumerate()
            .for_each(|(idx, c)| *c *= symbol(idx));
    }

    /// Applies a real diagonal Fourier multiplier.
    pub fn apply_symbol(&self, v: &Field, symbol: impl Fn(usize) -> f64) -> Field {
        let mut s = self.forward(v);
        self.scale_spectral(&mut s, symbol);
        self.inverse(&s)
    }

    /// `Δ_h v`.
    pub fn laplacian(&self, v: &Field) -> Field {
        self.apply_symbol(v, |idx| -self.ksq[idx])
    }

    /// `(𝒟_x v, 𝒟_y v)`. The unmatched `−M/2` mode is dropped in each
    /// direction so the derivative of a real field stays real.
    pub fn gradient(&self, v: &Field) -> (Field, Field) {
        let n = self.size;
        let s = self.forward(v);
        let nyq = n / 2;
        let mut dx = s.clone();
        let mut dy = s;
        for (idx, (cx, cy)) in dx.coeffs.iter_mut().zip(dy.coeffs.iter_mut()).enumerate() {
            let (lq, mq) = (idx / n, idx % n);
            let kx = if lq == nyq { 0.0 } else { self.wavenumbers[lq] };
            let ky = if mq == nyq { 0.0 } else { self.wavenumbers[mq] };
            *cx *= Complex64::new(0.0, kx);
            *cy *= Complex64::new(0.0, ky);
        }
        (self.inverse(&dx), self.inverse(&dy))
    }

    /// `(−Δ_h)^{−γ} v` for mean-zero `v`; the constant mode of the result is zero.
    pub fn inv_laplacian(&self, v: &Field, gamma: f64) -> Result<Field> {
        if !(gamma > 0.0) {
            return Err(Error::OutOfDomain(format!("gamma must be positive, got {gamma}")));
        }
        self.require_zero_mean(v)?;
        Ok(self.apply_symbol(v, |idx| {
            if idx == 0 {
                0.0
            } else {
                self.ksq[idx].powf(-gamma)
            }
        }))
    }

    fn require_zero_mean(&self, v: &Field) -> Result<()> {
        let mean = self.inner_one(v);
        let allowed = ZERO_MEAN_TOL * self.norm_l2(v) * self.length;
        if mean.abs() > allowed {
            return Err(Error::NonZeroMean { mean, allowed });
        }
        Ok(())
    }

    /// `⟨u, v⟩ = h² Σ u v`.
    pub fn inner(&self, u: &Field, v: &Field) -> f64 {
        self.check(u);
        self.check(v);
        let h2 = self.spacing * self.spacing;
        h2 * u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `⟨v, 1⟩`, the discrete volume.
    pub fn inner_one(&self, v: &Field) -> f64 {
        self.check(v);
        self.spacing * self.spacing * v.values.iter().sum::<f64>()
    }

    pub fn norm_l2(&self, v: &Field) -> f64 {
        self.inner(v, v).sqrt()
    }

    pub fn norm_lq(&self, v: &Field, q: f64) -> f64 {
        self.check(v);
        let h2 = self.spacing * self.spacing;
        (h2 * v.values.iter().map(|x| x.abs().powf(q)).sum::<f64>()).powf(1.0 / q)
    }

    /// `‖∇_h v‖ = √⟨−Δ_h v, v⟩`. Defined through the Laplacian so that it
    /// includes the Nyquist modes the real-valued [`Grid::gradient`] drops;
    /// this keeps the energy consistent with the chemical potential.
    pub fn seminorm_h1(&self, v: &Field) -> f64 {
        let s = self.forward(v);
        let l2 = self.length * self.length;
        let sum: f64 = s.coeffs.iter().zip(&self.ksq).map(|(c, &k2)| c.norm_sqr() * k2).sum();
        (l2 * sum).sqrt()
    }

    /// `‖v‖_{−1} = √⟨(−Δ_h)^{−1} v, v⟩`.
    pub fn norm_hm1(&self, v: &Field) -> Result<f64> {
        let w = self.inv_laplacian(v, 1.0)?;
        Ok(self.inner(&w, v).max(0.0).sqrt())
    }

    /// `‖v − v̄‖_{−1}`: the H⁻¹ norm of the mean-free part of `v`, for
    /// differences whose mean is nonzero only through roundoff.
    pub fn norm_hm1_projected(&self, v: &Field) -> f64 {
        let s = self.forward(v);
        let l2 = self.length * self.length;
        let sum: f64 = s
            .coeffs
            .iter()
            .zip(&self.ksq)
            .skip(1)
            .map(|(c, &k2)| c.norm_sqr() / k2)
            .sum();
        (l2 * sum).sqrt()
    }
}

fn mode_index(q: usize, n: usize) -> i64 {
    if q < n / 2 {
        q as i64
    } else {
        q as i64 - n as i64
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    const BLOCK: usize = 16;
    for jb in (0..n).step_by(BLOCK) {
        for ib in (0..n).step_by(BLOCK) {
            for j in jb..(jb + BLOCK).min(n) {
                for i in ib..(ib + BLOCK).min(n) {
                    dst[i * n + j] = src[j * n + i];
                }
            }
        }
    }
}

//! Spectral measures on the circle, the Fejér kernel, and the closed-form
//! variance predictor `(1/n)·E|S_n|²`.
//!
//! Convention used throughout the crate:
//!
//! * `r_k = E(X_k · conj X_0) = ∫ e^{ikx} dm(x)` (integration against
//!   normalized Haar measure for the density part);
//! * `(1/n)·E|S_n^{(β)}|² = Σ_{|k|<n} (1 − |k|/n) r_k e^{−ikβ} = (m ∗ K_{n−1})(β)`.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::sync::OnceLock;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::group::Angle;
use crate::stats::{ComplexKahanSum, KahanSum};

/// Default number of density grid points.
pub const DEFAULT_GRID: usize = 1 << 14;

/// Tolerance on the imaginary residual of the variance predictor, relative to `r_0`.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Human-readable statement of the phase convention, echoed in reports.
pub const PHASE_CONVENTION: &str =
    "r_k = E[X_k conj(X_0)] = int e^{ikx} dm(x); v(n,beta) = sum_{|k|<n} (1-|k|/n) r_k e^{-ik beta} = (m * K_{n-1})(beta)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("density value {value} at grid index {index} is negative or not finite")]
    BadDensity { index: usize, value: f64 },
    #[error("density grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
    #[error("atom mass {0} is negative or not finite")]
    BadAtom(f64),
    #[error("singularity coefficient {0} is negative or not finite")]
    BadSingularity(f64),
    #[error("covariance lag {needed} required but only lags < {available} are available")]
    MissingLag { needed: usize, available: usize },
    #[error("r_0 = {0} must be real and nonnegative")]
    BadVariance(Complex64),
    #[error("|r_{lag}| = {value} exceeds r_0 = {r0}")]
    CauchySchwarz { lag: usize, value: f64, r0: f64 },
    #[error("imaginary residual {residual:e} exceeds {tol:e}·r_0; phase convention mismatch")]
    ConventionResidual { residual: f64, tol: f64 },
    #[error("n must be at least 1")]
    ZeroLength,
    #[error("k_max = {k_max} must be smaller than the sample length {len}")]
    TooFewSamples { k_max: usize, len: usize },
}

/// Density component `coeff · |2 sin((x − location)/2)|^{−1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Singularity {
    pub location: Angle,
    pub coeff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: Angle,
    pub mass: f64,
}

/// `m = h dλ + m_⊥` with `h` a piecewise-linear density on a uniform grid plus
/// tagged half-power singularities, and `m_⊥` a finite sum of atoms.
#[derive(Debug, Default)]
pub struct SpectralMeasure {
    density: Vec<f64>,
    singularities: Vec<Singularity>,
    atoms: Vec<Atom>,
    dft: OnceLock<Vec<Complex64>>,
}

impl Clone for SpectralMeasure {
    fn clone(&self) -> Self {
        SpectralMeasure {
            density: self.density.clone(),
            singularities: self.singularities.clone(),
            atoms: self.atoms.clone(),
            dft: OnceLock::new(),
        }
    }
}

impl PartialEq for SpectralMeasure {
    fn eq(&self, other: &Self) -> bool {
        self.density == other.density
            && self.singularities == other.singularities
            && self.atoms == other.atoms
    }
}

impl SpectralMeasure {
    pub fn new(
        density: Vec<f64>,
        singularities: Vec<Singularity>,
        atoms: Vec<Atom>,
    ) -> Result<Self, SpectralError> {
        if density.len() == 1 {
            return Err(SpectralError::GridTooSmall(1));
        }
        for (index, &value) in density.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(SpectralError::BadDensity { index, value });
            }
        }
        for s in &singularities {
            if !(s.coeff >= 0.0) || !s.coeff.is_finite() {
                return Err(SpectralError::BadSingularity(s.coeff));
            }
        }
        for a in &atoms {
            if !(a.mass >= 0.0) || !a.mass.is_finite() {
                return Err(SpectralError::BadAtom(a.mass));
            }
        }
        Ok(SpectralMeasure {
            density,
            singularities,
            atoms,
            dft: OnceLock::new(),
        })
    }

    /// Constant density with total mass `level`.
    pub fn flat(level: f64, grid: usize) -> Result<Self, SpectralError> {
        Self::new(vec![level; grid], vec![], vec![])
    }

    /// Samples `f` at `x_j = 2πj/grid`.
    pub fn from_density_fn(f: impl Fn(f64) -> f64, grid: usize) -> Result<Self, SpectralError> {
        let density = (0..grid).map(|j| f(TAU * j as f64 / grid as f64)).collect();
        Self::new(density, vec![], vec![])
    }

    /// The density `1/|e^{ix} − e^{iβ₀}|^{1/2}`.
    pub fn singular_half_power(beta0: Angle) -> Self {
        SpectralMeasure {
            singularities: vec![Singularity {
                location: beta0,
                coeff: 1.0,
            }],
            ..Default::default()
        }
    }

    pub fn point_mass(location: Angle, mass: f64) -> Result<Self, SpectralError> {
        Self::new(vec![], vec![], vec![Atom { location, mass }])
    }

    pub fn with_atoms(
        mut self,
        atoms: impl IntoIterator<Item = Atom>,
    ) -> Result<Self, SpectralError> {
        self.atoms.extend(atoms);
        Self::new(self.density, self.singularities, self.atoms)
    }

    pub fn density_grid(&self) -> &[f64] {
        &self.density
    }

    pub fn singularities(&self) -> &[Singularity] {
        &self.singularities
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// The reflection-symmetric measure `(m + m∘(x ↦ −x))/2`, the spectral
    /// measure of the real part construction.
    pub fn symmetrized(&self) -> SpectralMeasure {
        let m = self.density.len();
        let density = (0..m)
            .map(|j| 0.5 * (self.density[j] + self.density[(m - j) % m]))
            .collect();
        let singularities = self
            .singularities
            .iter()
            .flat_map(|s| {
                let half = 0.5 * s.coeff;
                [
                    Singularity {
                        location: s.location,
                        coeff: half,
                    },
                    Singularity {
                        location: -s.location,
                        coeff: half,
                    },
                ]
            })
            .collect();
        let atoms = self
            .atoms
            .iter()
            .flat_map(|a| {
                let half = 0.5 * a.mass;
                [
                    Atom {
                        location: a.location,
                        mass: half,
                    },
                    Atom {
                        location: -a.location,
                        mass: half,
                    },
                ]
            })
            .collect();
        SpectralMeasure {
            density,
            singularities,
            atoms,
            dft: OnceLock::new(),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.fourier_coefficient(0).re
    }

    pub fn is_absolutely_continuous(&self) -> bool {
        self.atoms.iter().all(|a| a.mass == 0.0)
    }

    /// Density value `h(x)` (atoms excluded). Infinite at a singular point.
    pub fn density_at(&self, x: f64) -> f64 {
        let mut h = 0.0;
        let m = self.density.len();
        if m > 0 {
            let pos = Angle::new(x).radians() / TAU * m as f64;
            let j = (pos.floor() as usize) % m;
            let frac = pos - pos.floor();
            h += (1.0 - frac) * self.density[j] + frac * self.density[(j + 1) % m];
        }
        for s in &self.singularities {
            h += s.coeff
                / (2.0 * ((x - s.location.radians()) / 2.0).sin())
                    .abs()
                    .sqrt();
        }
        h
    }

    fn grid_dft(&self) -> &[Complex64] {
        self.dft.get_or_init(|| {
            let m = self.density.len();
            if m == 0 {
                return Vec::new();
            }
            let mut buf: Vec<Complex64> = self
                .density
                .iter()
                .map(|&h| Complex64::new(h, 0.0))
                .collect();
            FftPlanner::new().plan_fft_inverse(m).process(&mut buf);
            buf.iter().map(|z| z / m as f64).collect()
        })
    }

    /// Exact `∫ e^{ikx} h_pl(x) dλ(x)` for the piecewise-linear grid density.
    fn grid_coefficient(&self, k: i64) -> Complex64 {
        let m = self.density.len();
        if m == 0 {
            return Complex64::new(0.0, 0.0);
        }
        let dft = self.grid_dft();
        let idx = k.rem_euclid(m as i64) as usize;
        let u = PI * k as f64 / m as f64;
        let hat = if k == 0 { 1.0 } else { (u.sin() / u).powi(2) };
        dft[idx] * hat
    }

    /// `∫ e^{ikx} dm(x)`.
    pub fn fourier_coefficient(&self, k: i64) -> Complex64 {
        let mut acc = self.grid_coefficient(k);
        if !self.singularities.is_empty() {
            let g = half_power_coefficients(k.unsigned_abs() as usize)[k.unsigned_abs() as usize];
            for s in &self.singularities {
                acc += s.coeff * g * Complex64::from_polar(1.0, k as f64 * s.location.radians());
            }
        }
        for a in &self.atoms {
            acc += a.mass * Complex64::from_polar(1.0, k as f64 * a.location.radians());
        }
        acc
    }

    /// `∫ e^{ikx} dm(x)` for `k = 0..=k_max`.
    pub fn fourier_coefficients(&self, k_max: usize) -> Vec<Complex64> {
        let gammas = if self.singularities.is_empty() {
            Vec::new()
        } else {
            half_power_coefficients(k_max)
        };
        (0..=k_max)
            .map(|k| {
                let mut acc = self.grid_coefficient(k as i64);
                for s in &self.singularities {
                    acc += s.coeff
                        * gammas[k]
                        * Complex64::from_polar(1.0, k as f64 * s.location.radians());
                }
                for a in &self.atoms {
                    acc += a.mass * Complex64::from_polar(1.0, k as f64 * a.location.radians());
                }
                acc
            })
            .collect()
    }
}

/// Fourier coefficients `γ_k = ∫ e^{ikx} |2 sin(x/2)|^{−1/2} dλ(x)`, `k = 0..=k_max`.
///
/// `γ_0 = Γ(1/2)/Γ(3/4)²` and `γ_{k+1} = γ_k (k + 1/4)/(k + 3/4)`.
pub fn half_power_coefficients(k_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k_max + 1);
    let mut g = gamma(0.5) / gamma(0.75).powi(2);
    for k in 0..=k_max {
        out.push(g);
        g *= (k as f64 + 0.25) / (k as f64 + 0.75);
    }
    out
}

/// The Fejér kernel `K_{n−1}(e^{ix}) = (1/n)·sin²(nx/2)/sin²(x/2)`.
pub fn fejer(n: usize, x: f64) -> f64 {
    let n_f = n as f64;
    let x = Angle::new(x).radians();
    let s = (x / 2.0).sin();
    if s == 0.0 {
        return n_f;
    }
    let num = (n_f * x / 2.0).sin();
    (num * num) / (s * s) / n_f
}

/// Autocovariances `r_0..r_K` of a stationary sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSequence {
    r: Vec<Complex64>,
}

impl CovarianceSequence {
    /// Checks `r_0` real and nonnegative and `|r_k| ≤ r_0` (up to 1e-9 relative).
    pub fn new(r: Vec<Complex64>) -> Result<Self, SpectralError> {
        let Some(&r0) = r.first() else {
            return Err(SpectralError::MissingLag {
                needed: 0,
                available: 0,
            });
        };
        let scale = r0.norm().max(f64::MIN_POSITIVE);
        if !(r0.re >= 0.0) || r0.im.abs() > 1e-9 * scale {
            return Err(SpectralError::BadVariance(r0));
        }
        for (lag, v) in r.iter().enumerate().skip(1) {
            if v.norm() > r0.re * (1.0 + 1e-9) + 1e-300 {
                return Err(SpectralError::CauchySchwarz {
                    lag,
                    value: v.norm(),
                    r0: r0.re,
                });
            }
        }
        Ok(CovarianceSequence { r })
    }

    pub fn lags(&self) -> &[Complex64] {
        &self.r
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    /// `r_k` with `r_{−k} = conj(r_k)`.
    pub fn at(&self, k: i64) -> Option<Complex64> {
        let v = *self.r.get(k.unsigned_abs() as usize)?;
        Some(if k < 0 { v.conj() } else { v })
    }
}

/// `Σ_{|k|<n} (1 − |k|/n) r_k e^{−ikβ}`; the imaginary residual is checked and discarded.
pub fn predicted_variance(
    r: &CovarianceSequence,
    beta: Angle,
    n: usize,
) -> Result<f64, SpectralError> {
    if n == 0 {
        return Err(SpectralError::ZeroLength);
    }
    if r.len() < n {
        return Err(SpectralError::MissingLag {
            needed: n - 1,
            available: r.len(),
        });
    }
    let n_i = n as i64;
    let mut acc = ComplexKahanSum::default();
    for k in -(n_i - 1)..n_i {
        let w = 1.0 - k.unsigned_abs() as f64 / n as f64;
        let phase = Complex64::from_polar(1.0, -(k as f64) * beta.radians());
        acc.add(w * r.at(k).expect("lag checked") * phase);
    }
    let v = acc.value();
    let r0 = r.lags()[0].re;
    let residual = v.im.abs();
    if residual > RESIDUAL_TOL * r0.max(f64::MIN_POSITIVE) {
        return Err(SpectralError::ConventionResidual {
            residual,
            tol: RESIDUAL_TOL,
        });
    }
    Ok(v.re)
}

/// `(m ∗ K_{n−1})(β) = ∫ K_{n−1}(β − x) dm(x)`.
///
/// The density grid is integrated exactly under its piecewise-linear
/// interpretation and the half-power singularities through their closed-form
/// Fourier coefficients; atoms contribute `mass·K_{n−1}(β − ω)`.
pub fn spectral_convolve(m: &SpectralMeasure, n: usize, beta: Angle) -> f64 {
    assert!(n >= 1, "spectral_convolve needs n >= 1");
    let mut acc = KahanSum::default();
    let b = beta.radians();
    if !m.density.is_empty() {
        acc.add(m.grid_coefficient(0).re);
        for k in 1..n {
            let w = 1.0 - k as f64 / n as f64;
            let term = m.grid_coefficient(k as i64) * Complex64::from_polar(1.0, -(k as f64) * b);
            acc.add(2.0 * w * term.re);
        }
    }
    if !m.singularities.is_empty() {
        let g = half_power_coefficients(n);
        for s in &m.singularities {
            let d = s.location.radians() - b;
            let mut inner = KahanSum::default();
            inner.add(g[0]);
            for (k, gk) in g.iter().enumerate().take(n).skip(1) {
                let w = 1.0 - k as f64 / n as f64;
                inner.add(2.0 * w * gk * (k as f64 * d).cos());
            }
            acc.add(s.coeff * inner.value());
        }
    }
    for a in &m.atoms {
        acc.add(a.mass * fejer(n, b - a.location.radians()));
    }
    acc.value()
}

/// `r_k = ∫ e^{ikx} dm(x)`; negative `k` gives `conj(r_{|k|})` for real-valued densities.
pub fn covariance_from_measure(m: &SpectralMeasure, k: i64) -> Complex64 {
    m.fourier_coefficient(k)
}

/// Biased autocovariance estimates with batch-means standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCovariance {
    pub r: Vec<Complex64>,
    pub se: Vec<f64>,
}

impl EmpiricalCovariance {
    pub fn to_sequence(&self) -> Result<CovarianceSequence, SpectralError> {
        CovarianceSequence::new(self.r.clone())
    }
}

const BATCHES: usize = 32;

/// `r̂_k = (1/N) Σ_j X_{j+k} conj(X_j)` for `k ≤ k_max`.
pub fn empirical_autocovariance(
    samples: &[Complex64],
    k_max: usize,
) -> Result<EmpiricalCovariance, SpectralError> {
    let len = samples.len();
    if k_max >= len {
        return Err(SpectralError::TooFewSamples { k_max, len });
    }
    let mut r = Vec::with_capacity(k_max + 1);
    let mut se = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let count = len - k;
        let mut total = ComplexKahanSum::default();
        let batches = BATCHES.min(count / 2).max(1);
        let mut batch_means = Vec::with_capacity(batches);
        for b in 0..batches {
            let lo = b * count / batches;
            let hi = (b + 1) * count / batches;
            let mut part = ComplexKahanSum::default();
            for j in lo..hi {
                part.add(samples[j + k] * samples[j].conj());
            }
            let p = part.value();
            total.add(p);
            batch_means.push(p / (hi - lo) as f64);
        }
        r.push(total.value() / len as f64);
        se.push(if batches < 2 {
            f64::NAN
        } else {
            let bm = batch_means.iter().sum::<Complex64>() / batches as f64;
            let var = batch_means.iter().map(|z| (z - bm).norm_sqr()).sum::<f64>()
                / (batches as f64 - 1.0);
            (var / batches as f64).sqrt()
        });
    }
    Ok(EmpiricalCovariance { r, se })
}

/// Checkpoints `⌈2^{j/2}⌉ ≤ n_max` (deduplicated), always ending at `n_max`.
pub fn geometric_grid(n_max: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut j = 0;
    loop {
        let v = 2f64.powf(j as f64 / 2.0).ceil() as usize;
        if v > n_max {
            break;
        }
        if out.last() != Some(&v) {
            out.push(v);
        }
        j += 1;
    }
    if out.last() != Some(&n_max) && n_max > 0 {
        out.push(n_max);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    pub beta: f64,
    pub predicted: f64,
    pub mc_mean: Option<f64>,
    pub mc_se: Option<f64>,
}

/// `v(n, β) = (1/n)E|S_n|²` over a grid of `(n, β)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub rows: Vec<VarianceRow>,
}

impl VarianceCurve {
    pub fn to_csv(&self, header_comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(c) = header_comment {
            let _ = writeln!(out, "# {c}");
        }
        out.push_str("n,beta,predicted,mc_mean,mc_se\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.17},{:.12e},{},{}",
                r.n,
                r.beta,
                r.predicted,
                opt(r.mc_mean),
                opt(r.mc_se)
            );
        }
        out
    }
}

//! Stationary Gaussian sequences from a spectral measure: circulant embedding
//! for the density part, independent random harmonics for the atoms.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use super::{Field, ProcessError};
use crate::spectral::{Atom, SpectralMeasure};

/// Largest circulant embedding tried before giving up.
pub const MAX_EMBEDDING: usize = 1 << 22;
/// Negative eigenvalues above `−CLIP_TOL·λ_max` are clipped to zero.
pub const CLIP_TOL: f64 = 1e-10;

/// Precomputed square-root eigenvalues and FFT plan, shared by all streams
/// of one process.
pub struct GaussianPlan {
    field: Field,
    window: usize,
    sqrt_eig: Vec<f64>,
    fft: Option<Arc<dyn Fft<f64>>>,
    atoms: Vec<Atom>,
    nugget: f64,
    embedding: usize,
}

impl std::fmt::Debug for GaussianPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianPlan")
            .field("field", &self.field)
            .field("window", &self.window)
            .field("embedding", &self.embedding)
            .field("atoms", &self.atoms.len())
            .field("nugget", &self.nugget)
            .finish()
    }
}

impl GaussianPlan {
    /// `measure` is the measure as given; for a real field the symmetrized
    /// measure is realized. `nugget` is removed from the density part (a flat
    /// component of that total mass), to be added back by the caller.
    pub fn new(
        measure: &SpectralMeasure,
        window: usize,
        field: Field,
        nugget: f64,
    ) -> Result<Self, ProcessError> {
        if window < 2 {
            return Err(ProcessError::InvalidSpec(format!(
                "window must be at least 2, got {window}"
            )));
        }
        if !(measure.total_mass() > 0.0) {
            return Err(ProcessError::InvalidSpec(
                "spectral measure has zero total mass".into(),
            ));
        }
        if !(nugget >= 0.0) {
            return Err(ProcessError::InvalidSpec(format!(
                "nugget {nugget} must be nonnegative"
            )));
        }
        let effective = match field {
            Field::Real => measure.symmetrized(),
            Field::Complex => measure.clone(),
        };
        let density_only = SpectralMeasure::new(
            effective.density_grid().to_vec(),
            effective.singularities().to_vec(),
            vec![],
        )
        .map_err(|e| ProcessError::InvalidSpec(e.to_string()))?;
        let atoms = measure
            .atoms()
            .iter()
            .copied()
            .filter(|a| a.mass > 0.0)
            .collect();

        let has_density =
            !density_only.density_grid().is_empty() || !density_only.singularities().is_empty();
        if !has_density {
            if nugget > 0.0 {
                return Err(ProcessError::InvalidSpec(
                    "nugget larger than the density part".into(),
                ));
            }
            return Ok(GaussianPlan {
                field,
                window,
                sqrt_eig: Vec::new(),
                fft: None,
                atoms,
                nugget,
                embedding: 0,
            });
        }

        let mut size = (4 * window).next_power_of_two();
        loop {
            let coeffs = density_only.fourier_coefficients(size / 2);
            let mut column = vec![Complex64::new(0.0, 0.0); size];
            column[..=size / 2].copy_from_slice(&coeffs[..=size / 2]);
            column[0] -= nugget;
            column[size / 2] = Complex64::new(column[size / 2].re, 0.0);
            for k in 1..size / 2 {
                column[size - k] = coeffs[k].conj();
            }
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(size).process(&mut column);
            let eig: Vec<f64> = column.iter().map(|z| z.re).collect();
            let max = eig.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.iter().cloned().fold(f64::MAX, f64::min);
            if min >= -CLIP_TOL * max {
                let sqrt_eig = eig
                    .iter()
                    .map(|&l| (l.max(0.0) / size as f64).sqrt())
                    .collect();
                return Ok(GaussianPlan {
                    field,
                    window,
                    sqrt_eig,
                    fft: Some(planner.plan_fft_inverse(size)),
                    atoms,
                    nugget,
                    embedding: size,
                });
            }
            if size >= MAX_EMBEDDING {
                return Err(ProcessError::EmbeddingFailed {
                    size,
                    most_negative: min,
                });
            }
            size *= 2;
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embedding_size(&self) -> usize {
        self.embedding
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// One block of `window` values.
    pub fn sample_block(&self, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        self.sample_blocks(rng).0
    }

    /// One circulant draw. For a real field the real and imaginary parts of
    /// the draw are independent with the same law, so a second block is
    /// returned as well.
    pub fn sample_blocks(&self, rng: &mut ChaCha8Rng) -> (Vec<Complex64>, Option<Vec<Complex64>>) {
        let zero = Complex64::new(0.0, 0.0);
        let mut out = vec![zero; self.window];
        let mut second = match self.field {
            Field::Real => Some(vec![zero; self.window]),
            Field::Complex => None,
        };
        if let Some(fft) = &self.fft {
            let scale = match self.field {
                Field::Real => 1.0,
                Field::Complex => std::f64::consts::FRAC_1_SQRT_2,
            };
            let mut buf: Vec<Complex64> = self
                .sqrt_eig
                .iter()
                .map(|&s| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(re, im) * (s * scale)
                })
                .collect();
            fft.process(&mut buf);
            match &mut second {
                Some(im_block) => {
                    for ((o, p), z) in out.iter_mut().zip(im_block.iter_mut()).zip(&buf) {
                        *o = Complex64::new(z.re, 0.0);
                        *p = Complex64::new(z.im, 0.0);
                    }
                }
                None => out.copy_from_slice(&buf[..self.window]),
            }
        }
        self.add_atoms(&mut out, rng);
        if let Some(block) = &mut second {
            self.add_atoms(block, rng);
        }
        (out, second)
    }

    fn add_atoms(&self, out: &mut [Complex64], rng: &mut ChaCha8Rng) {
        for atom in &self.atoms {
            let amp = atom.mass.sqrt();
            let w = atom.location.radians();
            match self.field {
                Field::Real => {
                    let a: f64 = rng.sample(StandardNormal);
                    let b: f64 = rng.sample(StandardNormal);
                    for (k, o) in out.iter_mut().enumerate() {
                        let t = k as f64 * w;
                        o.re += amp * (a * t.cos() + b * t.sin());
                    }
                }
                Field::Complex => {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let eps = Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2;
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += amp * eps * Complex64::from_polar(1.0, k as f64 * w);
                    }
                }
            }
        }
    }
}

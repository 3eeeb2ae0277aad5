//! Stationary, seedable increment processes `(X_k)` with known covariance
//! structure.
//!
//! A [`ProcessSpec`] is the declarative (JSON-serializable) description;
//! [`ProcessSpec::prepare`] validates it and precomputes shared data, and
//! [`PreparedProcess::stream`] hands out independent single-owner streams.

mod gaussian;
mod markov;
mod mixing;
pub mod serde_complex;

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::Angle;
use crate::spectral::{self, Atom, SpectralMeasure, DEFAULT_GRID};

pub use gaussian::{GaussianPlan, CLIP_TOL, MAX_EMBEDDING};
pub use markov::{
    golden_mean_chain, is_irreducible, is_primitive, parry_chain, perron_pair, MarkovChain,
};
pub use mixing::{mixing_covariance_bound_check, MixingCheck, WindowFn};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProcessError {
    #[error("invalid process spec: {0}")]
    InvalidSpec(String),
    #[error("circulant embedding of size {size} still has eigenvalue {most_negative:e}")]
    EmbeddingFailed { size: usize, most_negative: f64 },
    #[error("covariance lag must be nonnegative, got {0}")]
    NegativeLag(i64),
    #[error("{0}")]
    NotApplicable(String),
}

/// Whether a Gaussian or moving-average process is real or complex valued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    #[default]
    Real,
    Complex,
}

impl std::str::FromStr for Field {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "real" => Ok(Field::Real),
            "complex" => Ok(Field::Complex),
            other => Err(format!("unknown field '{other}', expected real|complex")),
        }
    }
}

/// Law of i.i.d. increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum IidLaw {
    /// Circular complex Gaussian with `E|X|² = variance`.
    ComplexGaussian { variance: f64 },
    /// Real ±1 with equal probability.
    Rademacher,
    /// Uniform on the unit circle.
    UniformCircle,
}

impl IidLaw {
    pub fn variance(&self) -> f64 {
        match self {
            IidLaw::ComplexGaussian { variance } => *variance,
            IidLaw::Rademacher | IidLaw::UniformCircle => 1.0,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Complex64 {
        match *self {
            IidLaw::ComplexGaussian { variance } => {
                let s = (variance / 2.0).sqrt();
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(s * re, s * im)
            }
            IidLaw::Rademacher => {
                Complex64::new(if rng.random::<bool>() { 1.0 } else { -1.0 }, 0.0)
            }
            IidLaw::UniformCircle => Complex64::from_polar(1.0, TAU * rng.random::<f64>()),
        }
    }
}

/// Closed-form density families, or an explicit grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "density", rename_all = "kebab-case")]
pub enum DensitySpec {
    /// Constant density with total mass `level`.
    Flat { level: f64 },
    /// `1/|e^{ix} − e^{iβ₀}|^{1/2}`.
    SingularHalfPower { beta0: f64 },
    /// Values on a uniform grid over `[0, 2π)`.
    Grid { values: Vec<f64> },
    /// Purely atomic measure.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    pub location: f64,
    pub mass: f64,
}

/// JSON description of a spectral measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    #[serde(flatten)]
    pub density: DensitySpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atoms: Vec<AtomSpec>,
    /// Grid size used for the `flat` family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
}

impl MeasureSpec {
    pub fn flat(level: f64) -> Self {
        MeasureSpec {
            density: DensitySpec::Flat { level },
            atoms: vec![],
            grid_points: None,
        }
    }

    pub fn singular_half_power(beta0: f64) -> Self {
        MeasureSpec {
            density: DensitySpec::SingularHalfPower { beta0 },
            atoms: vec![],
            grid_points: None,
        }
    }

    pub fn atom(location: f64, mass: f64) -> Self {
        MeasureSpec {
            density: DensitySpec::None,
            atoms: vec![AtomSpec { location, mass }],
            grid_points: None,
        }
    }

    pub fn build(&self) -> Result<SpectralMeasure, ProcessError> {
        let err = |e: spectral::SpectralError| ProcessError::InvalidSpec(e.to_string());
        let base = match &self.density {
            DensitySpec::Flat { level } => {
                SpectralMeasure::flat(*level, self.grid_points.unwrap_or(DEFAULT_GRID))
                    .map_err(err)?
            }
            DensitySpec::SingularHalfPower { beta0 } => {
                SpectralMeasure::singular_half_power(Angle::new(*beta0))
            }
            DensitySpec::Grid { values } => {
                SpectralMeasure::new(values.clone(), vec![], vec![]).map_err(err)?
            }
            DensitySpec::None => SpectralMeasure::default(),
        };
        base.with_atoms(self.atoms.iter().map(|a| Atom {
            location: Angle::new(a.location),
            mass: a.mass,
        }))
        .map_err(err)
    }
}

/// One Fourier mode `coeff · e^{i·index·x}` of the observable of a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub index: i64,
    #[serde(with = "serde_complex::single")]
    pub coeff: Complex64,
}

/// Declarative description of a stationary increment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProcessSpec {
    Iid {
        #[serde(flatten)]
        law: IidLaw,
    },
    /// `X_k = Σ_j θ_j ξ_{k−j}` with i.i.d. standard Gaussian drivers.
    MovingAverage {
        #[serde(with = "serde_complex::vec")]
        coeffs: Vec<Complex64>,
        #[serde(default)]
        field: Field,
    },
    #[serde(rename = "markov")]
    MarkovChain(MarkovChain),
    /// Stationary Gaussian sequence with the given spectral measure, realized
    /// in blocks of `window` values.
    GaussianSpectral {
        measure: MeasureSpec,
        window: usize,
        #[serde(default)]
        field: Field,
    },
    /// `X_k = g(θ₀ + kα)` with `θ₀` uniform and `g(x) = Σ ĝ_j e^{ijx}`.
    Rotation {
        alpha: f64,
        fourier: Vec<FourierTerm>,
    },
}

impl ProcessSpec {
    pub fn iid(law: IidLaw) -> Self {
        ProcessSpec::Iid { law }
    }

    pub fn moving_average(coeffs: Vec<Complex64>, field: Field) -> Self {
        ProcessSpec::MovingAverage { coeffs, field }
    }

    pub fn gaussian_spectral(measure: MeasureSpec, window: usize, field: Field) -> Self {
        ProcessSpec::GaussianSpectral {
            measure,
            window,
            field,
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ProcessError> {
        serde_json::from_str(s).map_err(|e| ProcessError::InvalidSpec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("process spec serializes")
    }

    /// Validate and precompute everything streams share.
    pub fn prepare(&self) -> Result<PreparedProcess, ProcessError> {
        self.prepare_with_nugget(0.0)
    }

    /// As [`prepare`](Self::prepare), removing a white-noise component of
    /// variance `nugget` from a Gaussian-spectral process. The caller is
    /// responsible for adding an independent white noise of that variance.
    pub fn prepare_with_nugget(&self, nugget: f64) -> Result<PreparedProcess, ProcessError> {
        if nugget != 0.0 && !matches!(self, ProcessSpec::GaussianSpectral { .. }) {
            return Err(ProcessError::NotApplicable(
                "nugget splitting needs a gaussian-spectral process".into(),
            ));
        }
        let kind = match self {
            ProcessSpec::Iid { law } => {
                if let IidLaw::ComplexGaussian { variance } = law {
                    if !(*variance >= 0.0) || !variance.is_finite() {
                        return Err(ProcessError::InvalidSpec(format!(
                            "variance {variance} is invalid"
                        )));
                    }
                }
                Prepared::Iid(*law)
            }
            ProcessSpec::MovingAverage { coeffs, field } => {
                if coeffs.is_empty() {
                    return Err(ProcessError::InvalidSpec(
                        "moving average needs at least one coefficient".into(),
                    ));
                }
                if *field == Field::Real && coeffs.iter().any(|c| c.im != 0.0) {
                    return Err(ProcessError::InvalidSpec(
                        "real moving average needs real coefficients".into(),
                    ));
                }
                Prepared::MovingAverage {
                    coeffs: Arc::new(coeffs.clone()),
                    field: *field,
                }
            }
            ProcessSpec::MarkovChain(chain) => {
                let chain = chain.clone().validated()?;
                let rows: Vec<Vec<f64>> =
                    chain.transition.iter().map(|row| cumulative(row)).collect();
                Prepared::Markov(Arc::new(MarkovData {
                    initial: cumulative(chain.stationary_vec()),
                    cumulative: rows,
                    emitted: chain.emitted_values(),
                }))
            }
            ProcessSpec::GaussianSpectral {
                measure,
                window,
                field,
            } => {
                let m = measure.build()?;
                Prepared::Gaussian(Arc::new(GaussianPlan::new(&m, *window, *field, nugget)?))
            }
            ProcessSpec::Rotation { alpha, fourier } => {
                if fourier.is_empty() {
                    return Err(ProcessError::InvalidSpec(
                        "rotation needs at least one Fourier term".into(),
                    ));
                }
                if !alpha.is_finite() {
                    return Err(ProcessError::InvalidSpec(
                        "rotation number must be finite".into(),
                    ));
                }
                Prepared::Rotation {
                    alpha: *alpha,
                    fourier: Arc::new(fourier.clone()),
                }
            }
        };
        Ok(PreparedProcess { kind })
    }

    /// Closed-form autocovariance `r_k = E(X_k conj X_0)`, `k ≥ 0`.
    pub fn covariance(&self, k: i64) -> Result<Complex64, ProcessError> {
        if k < 0 {
            return Err(ProcessError::NegativeLag(k));
        }
        let k = k as usize;
        Ok(match self {
            ProcessSpec::Iid { law } => {
                if k == 0 {
                    Complex64::new(law.variance(), 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }
            ProcessSpec::MovingAverage { coeffs, .. } => (0..coeffs.len().saturating_sub(k))
                .map(|j| coeffs[j + k] * coeffs[j].conj())
                .sum(),
            ProcessSpec::MarkovChain(chain) => chain.clone().validated()?.covariance(k),
            ProcessSpec::GaussianSpectral { measure, field, .. } => {
                let m = measure.build()?;
                let m = if *field == Field::Real {
                    m.symmetrized()
                } else {
                    m
                };
                spectral::covariance_from_measure(&m, k as i64)
            }
            ProcessSpec::Rotation { alpha, fourier } => fourier
                .iter()
                .map(|t| {
                    t.coeff.norm_sqr()
                        * Complex64::from_polar(1.0, (t.index * k as i64) as f64 * alpha)
                })
                .sum(),
        })
    }

    /// `r_0, …, r_{k_max}` as a validated covariance sequence.
    pub fn covariance_sequence(
        &self,
        k_max: usize,
    ) -> Result<spectral::CovarianceSequence, ProcessError> {
        let r = match self {
            ProcessSpec::MarkovChain(chain) => {
                let chain = chain.clone().validated()?;
                (0..=k_max).map(|k| chain.covariance(k)).collect()
            }
            ProcessSpec::GaussianSpectral { measure, field, .. } => {
                let m = measure.build()?;
                let m = if *field == Field::Real {
                    m.symmetrized()
                } else {
                    m
                };
                m.fourier_coefficients(k_max)
            }
            _ => (0..=k_max as i64)
                .map(|k| self.covariance(k))
                .collect::<Result<Vec<_>, _>>()?,
        };
        spectral::CovarianceSequence::new(r).map_err(|e| ProcessError::InvalidSpec(e.to_string()))
    }

    /// The spectral measure of the process family, built independently of
    /// [`covariance`](Self::covariance): densities are sampled on a grid of
    /// `grid` points from their closed forms.
    pub fn spectral_measure(&self, grid: usize) -> Result<SpectralMeasure, ProcessError> {
        let err = |e: spectral::SpectralError| ProcessError::InvalidSpec(e.to_string());
        match self {
            ProcessSpec::Iid { law } => SpectralMeasure::flat(law.variance(), grid).map_err(err),
            ProcessSpec::MovingAverage { coeffs, .. } => SpectralMeasure::from_density_fn(
                |x| {
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(j, c)| c * Complex64::from_polar(1.0, -(j as f64) * x))
                        .sum::<Complex64>()
                        .norm_sqr()
                },
                grid,
            )
            .map_err(err),
            ProcessSpec::MarkovChain(chain) => {
                let chain = chain.clone().validated()?;
                // round-off can leave tiny negatives where h touches zero
                SpectralMeasure::from_density_fn(|x| chain.spectral_density(x).max(0.0), grid)
                    .map_err(err)
            }
            ProcessSpec::GaussianSpectral { measure, field, .. } => {
                let m = measure.build()?;
                Ok(if *field == Field::Real {
                    m.symmetrized()
                } else {
                    m
                })
            }
            ProcessSpec::Rotation { alpha, fourier } => SpectralMeasure::new(
                vec![],
                vec![],
                fourier
                    .iter()
                    .map(|t| Atom {
                        location: Angle::new(t.index as f64 * alpha),
                        mass: t.coeff.norm_sqr(),
                    })
                    .collect(),
            )
            .map_err(err),
        }
    }

    /// Length of the dependence range for finitely dependent specs.
    pub fn dependence_range(&self) -> Option<usize> {
        match self {
            ProcessSpec::Iid { .. } => Some(0),
            ProcessSpec::MovingAverage { coeffs, .. } => Some(coeffs.len().saturating_sub(1)),
            _ => None,
        }
    }

    /// Largest block length a stream can deliver with the stated covariance.
    pub fn window(&self) -> Option<usize> {
        match self {
            ProcessSpec::GaussianSpectral { window, .. } => Some(*window),
            _ => None,
        }
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = p
        .iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

#[derive(Debug)]
struct MarkovData {
    initial: Vec<f64>,
    cumulative: Vec<Vec<f64>>,
    emitted: Vec<Complex64>,
}

#[derive(Debug, Clone)]
enum Prepared {
    Iid(IidLaw),
    MovingAverage {
        coeffs: Arc<Vec<Complex64>>,
        field: Field,
    },
    Markov(Arc<MarkovData>),
    Gaussian(Arc<GaussianPlan>),
    Rotation {
        alpha: f64,
        fourier: Arc<Vec<FourierTerm>>,
    },
}

/// A validated process with shared precomputation; cheap to clone.
#[derive(Debug, Clone)]
pub struct PreparedProcess {
    kind: Prepared,
}

/// The generator for stream `stream_id` of a run with master `seed`.
///
/// ChaCha is counter based: each `(seed, stream_id)` pair selects an
/// independent keystream, so replica streams never depend on scheduling.
pub fn stream_rng(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

impl PreparedProcess {
    pub fn stream(&self, seed: u64, stream_id: u64) -> IncrementStream {
        let mut rng = stream_rng(seed, stream_id);
        let state = match &self.kind {
            Prepared::Iid(law) => StreamState::Iid(*law),
            Prepared::MovingAverage { coeffs, field } => {
                let q = coeffs.len();
                let mut drivers = vec![Complex64::new(0.0, 0.0); q];
                // slot i holds ξ_{−1−i} before the first step and ξ_{k−i} after step k
                for d in drivers.iter_mut() {
                    *d = draw_driver(&mut rng, *field);
                }
                StreamState::MovingAverage {
                    coeffs: Arc::clone(coeffs),
                    field: *field,
                    drivers,
                }
            }
            Prepared::Markov(data) => {
                let u: f64 = rng.random();
                let state = data.initial.iter().position(|&c| u < c).unwrap_or(0);
                StreamState::Markov {
                    data: Arc::clone(data),
                    state,
                }
            }
            Prepared::Gaussian(plan) => StreamState::Gaussian {
                plan: Arc::clone(plan),
                block: Vec::new(),
                next: 0,
                pending: None,
            },
            Prepared::Rotation { alpha, fourier } => StreamState::Rotation {
                alpha: *alpha,
                theta0: TAU * rng.random::<f64>(),
                fourier: Arc::clone(fourier),
            },
        };
        IncrementStream {
            rng,
            state,
            position: 0,
        }
    }

    pub fn gaussian_plan(&self) -> Option<&GaussianPlan> {
        match &self.kind {
            Prepared::Gaussian(plan) => Some(plan),
            _ => None,
        }
    }
}

fn draw_driver(rng: &mut ChaCha8Rng, field: Field) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    match field {
        Field::Real => Complex64::new(re, 0.0),
        Field::Complex => {
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        }
    }
}

#[derive(Debug)]
enum StreamState {
    Iid(IidLaw),
    MovingAverage {
        coeffs: Arc<Vec<Complex64>>,
        field: Field,
        drivers: Vec<Complex64>,
    },
    Markov {
        data: Arc<MarkovData>,
        state: usize,
    },
    Gaussian {
        plan: Arc<GaussianPlan>,
        block: Vec<Complex64>,
        next: usize,
        pending: Option<Vec<Complex64>>,
    },
    Rotation {
        alpha: f64,
        theta0: f64,
        fourier: Arc<Vec<FourierTerm>>,
    },
}

/// A single-owner stream `X_0, X_1, …`. Identical `(spec, seed, stream_id)`
/// give bit-identical output.
///
/// Gaussian-spectral streams are generated in independent blocks of the
/// spec's `window`; the stated covariance holds within a block.
#[derive(Debug)]
pub struct IncrementStream {
    rng: ChaCha8Rng,
    state: StreamState,
    position: u64,
}

impl IncrementStream {
    /// Index of the next value to be emitted.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn next_increment(&mut self) -> Complex64 {
        self.position += 1;
        let rng = &mut self.rng;
        match &mut self.state {
            StreamState::Iid(law) => law.sample(rng),
            StreamState::MovingAverage {
                coeffs,
                field,
                drivers,
            } => {
                drivers.rotate_right(1);
                drivers[0] = draw_driver(rng, *field);
                coeffs.iter().zip(drivers.iter()).map(|(c, d)| c * d).sum()
            }
            StreamState::Markov { data, state } => {
                let x = data.emitted[*state];
                let u: f64 = rng.random();
                let row = &data.cumulative[*state];
                *state = row.iter().position(|&c| u < c).unwrap_or(row.len() - 1);
                x
            }
            StreamState::Gaussian {
                plan,
                block,
                next,
                pending,
            } => {
                if *next >= block.len() {
                    *block = match pending.take() {
                        Some(b) => b,
                        None => {
                            let (first, second) = plan.sample_blocks(rng);
                            *pending = second;
                            first
                        }
                    };
                    *next = 0;
                }
                let x = block[*next];
                *next += 1;
                x
            }
            StreamState::Rotation {
                alpha,
                theta0,
                fourier,
            } => {
                let t = *theta0 + (self.position - 1) as f64 * *alpha;
                fourier
                    .iter()
                    .map(|f| f.coeff * Complex64::from_polar(1.0, f.index as f64 * t))
                    .sum()
            }
        }
    }

    /// Skips ahead to the next block boundary of a block-generated stream
    /// (a no-op for other processes or when already at a boundary).
    pub fn skip_to_block_boundary(&mut self) {
        if let StreamState::Gaussian { block, next, .. } = &mut self.state {
            if *next > 0 && *next < block.len() {
                self.position += (block.len() - *next) as u64;
                *next = block.len();
            }
        }
    }

    /// Raw access to the stream's generator, for auxiliary draws that must
    /// stay tied to this stream's seed.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl Iterator for IncrementStream {
    type Item = Complex64;
    fn next(&mut self) -> Option<Complex64> {
        Some(self.next_increment())
    }
}

/// Validates `spec` and returns stream 0 for `seed`.
pub fn make_stream(spec: &ProcessSpec, seed: u64) -> Result<IncrementStream, ProcessError> {
    Ok(spec.prepare()?.stream(seed, 0))
}

pub fn covariance(spec: &ProcessSpec, k: i64) -> Result<Complex64, ProcessError> {
    spec.covariance(k)
}

/// Gaussian stream with the given spectral measure; the first `window`
/// values have covariance `r_k = ∫ e^{ikx} dm` (symmetrized for a real field).
pub fn gaussian_from_spectral(
    measure: &SpectralMeasure,
    window: usize,
    field: Field,
    seed: u64,
) -> Result<IncrementStream, ProcessError> {
    let plan = GaussianPlan::new(measure, window, field, 0.0)?;
    Ok(PreparedProcess {
        kind: Prepared::Gaussian(Arc::new(plan)),
    }
    .stream(seed, 0))
}

#[cfg(test)]
mod tests;

//! Functionals of a checkpoint ensemble: small-ball tables, Cesàro averages,
//! the recurrence constant, characteristic-function structure tests,
//! summability of return probabilities, and an evidence label.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::group::Angle;
use crate::spectral::PHASE_CONVENTION;
use crate::stats::{linear_fit, normal_upper_quantile, LinearFit};
use crate::walk::{char_term, CheckpointEnsemble, Estimate, WalkError};

pub const SCHEMA_VERSION: u32 = 1;
/// Largest n for which τ_n is computed as a literal average.
pub const TAU_DENSE_MAX: usize = 1 << 12;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error("eta {0} is not on the ensemble's grid")]
    UnknownEta(f64),
    #[error("checkpoint window is empty")]
    EmptyWindow,
    #[error("sample sets have different sizes ({0} and {1})")]
    MismatchedSamples(usize, usize),
    #[error("need at least two samples")]
    TooFewSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Recurrence needs `c_hat(η) > c_min` for every η below 0.5.
    pub c_min: f64,
    /// One-sided level of all confidence statements.
    pub significance: f64,
    /// Runs with smaller `n_max` are labelled inconclusive.
    pub min_n_max: usize,
    /// The `c_hat` window is `n ≥ n_max / window_divisor`.
    pub window_divisor: usize,
    /// Largest rotation power in the rotation-invariance statistic.
    pub m_max: usize,
    /// Poisson-bootstrap replicates for noise floors.
    pub bootstrap: usize,
    /// The summability fit uses `n ≥ n_max / fit_divisor` (and `n ≥ 16`).
    pub fit_divisor: usize,
    /// Blow-up factor in the bounded-Cesàro surrogate.
    pub blowup: f64,
    /// Mean `|n^{−1/2}S_n|²` below which the scaled walk is said to collapse.
    pub collapse: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            c_min: 0.05,
            significance: 1e-3,
            min_n_max: 256,
            window_divisor: 8,
            m_max: 8,
            bootstrap: 32,
            fit_divisor: 32,
            blowup: 10.0,
            collapse: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    RecurrenceEvidence,
    TransienceEvidence,
    Inconclusive,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::RecurrenceEvidence => "recurrence-evidence",
            Label::TransienceEvidence => "transience-evidence",
            Label::Inconclusive => "inconclusive",
        })
    }
}

fn eta_index(ens: &CheckpointEnsemble, eta: f64) -> Result<usize, DiagnosticsError> {
    ens.eta_grid
        .iter()
        .position(|&e| (e - eta).abs() <= 1e-12 * eta.abs())
        .ok_or(DiagnosticsError::UnknownEta(eta))
}

/// `P(|n^{−1/2}S_n| ≤ η)` with its binomial SE.
pub fn small_ball(
    ens: &CheckpointEnsemble,
    n: usize,
    eta: f64,
) -> Result<Estimate, DiagnosticsError> {
    let e = eta_index(ens, eta)?;
    Ok(ens.checkpoint(n)?.scaled_small_ball(e))
}

/// `P(|S_n| ≤ η)`; conditional on the non-white part when the run split
/// off a nugget, otherwise the plain indicator frequency.
pub fn unscaled_small_ball(
    ens: &CheckpointEnsemble,
    n: usize,
    eta: f64,
) -> Result<Estimate, DiagnosticsError> {
    let e = eta_index(ens, eta)?;
    Ok(ens.checkpoint(n)?.unscaled_small_ball(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauMode {
    Dense,
    Grid,
}

/// Cesàro averages `τ_n = n⁻¹ Σ_{k≤n} σ_k` at every recorded `n`, from
/// values `vals[i]` at increasing `ks[i]`. Where every `k ≤ n` is recorded
/// (and `n ≤ TAU_DENSE_MAX`) the sum is literal; otherwise unrecorded `k` are
/// filled by linear interpolation in `log k` (constant before `ks[0]`).
pub fn tau_from_values(ks: &[usize], vals: &[f64]) -> Vec<(f64, TauMode)> {
    let mut out = Vec::with_capacity(ks.len());
    let mut sum = 0.0;
    let mut dense = true;
    let mut next = 1usize;
    for (i, (&n, &v)) in ks.iter().zip(vals).enumerate() {
        if n != next {
            dense = false;
        }
        while next < n {
            let val = if i == 0 {
                v
            } else {
                let (a, b) = ((ks[i - 1] as f64).ln(), (n as f64).ln());
                let w = ((next as f64).ln() - a) / (b - a);
                vals[i - 1] + w * (v - vals[i - 1])
            };
            sum += val;
            next += 1;
        }
        sum += v;
        next = n + 1;
        let mode = if dense && n <= TAU_DENSE_MAX {
            TauMode::Dense
        } else {
            TauMode::Grid
        };
        out.push((sum / n as f64, mode));
    }
    out
}

/// `τ_n(B_η)` for the scaled ball at recorded `n`.
pub fn tau(
    ens: &CheckpointEnsemble,
    n: usize,
    eta: f64,
) -> Result<(f64, TauMode), DiagnosticsError> {
    let e = eta_index(ens, eta)?;
    let i = ens.index_of(n)?;
    let ks: Vec<usize> = ens.checkpoints[..=i].iter().map(|c| c.n).collect();
    let vals: Vec<f64> = ens.checkpoints[..=i]
        .iter()
        .map(|c| c.scaled_small_ball(e).value)
        .collect();
    Ok(*tau_from_values(&ks, &vals).last().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecurrenceConstant {
    pub eta: f64,
    /// `min_{n in window} p̂(n, η)/η²`.
    pub c_hat: f64,
    /// Same with `p̂` replaced by its one-sided lower confidence bound.
    pub c_lower: f64,
    pub n_at_min: usize,
}

/// `c_hat(η)` over the window of checkpoints `ns` with estimates `p`.
pub fn recurrence_constant(
    ns: &[usize],
    p: &[Estimate],
    eta: f64,
    significance: f64,
) -> Result<RecurrenceConstant, DiagnosticsError> {
    if ns.is_empty() {
        return Err(DiagnosticsError::EmptyWindow);
    }
    let z = normal_upper_quantile(significance);
    let e2 = eta * eta;
    let mut best = RecurrenceConstant {
        eta,
        c_hat: f64::INFINITY,
        c_lower: f64::INFINITY,
        n_at_min: ns[0],
    };
    for (&n, est) in ns.iter().zip(p) {
        let c = est.value / e2;
        if c < best.c_hat {
            best.c_hat = c;
            best.n_at_min = n;
        }
        best.c_lower = best.c_lower.min((est.value - z * est.se).max(0.0) / e2);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StructureStat {
    pub value: f64,
    /// Mean of the bootstrap replicates of the statistic's fluctuation.
    pub noise_floor: f64,
    /// Their standard deviation.
    pub noise_se: f64,
    pub samples: usize,
}

impl StructureStat {
    /// Whether the statistic is within five SE of its noise floor.
    pub fn within_noise(&self) -> bool {
        self.value <= self.noise_floor + 5.0 * self.noise_se
    }
}

/// Weighted characteristic functions `Σ w_i e^{i⟨p, z_i⟩} / Σ w_i` at
/// `points`, for the plain weights and for `bootstrap` Poisson(1) reweightings.
fn bootstrap_ecf(
    samples: &[&[Complex64]],
    points: &[Vec<Complex64>],
    bootstrap: usize,
    seed: u64,
) -> (Vec<Vec<Complex64>>, Vec<Vec<Vec<Complex64>>>) {
    let zero = Complex64::new(0.0, 0.0);
    let mut plain: Vec<Vec<Complex64>> = points.iter().map(|p| vec![zero; p.len()]).collect();
    let mut boot: Vec<Vec<Vec<Complex64>>> = vec![plain.clone(); bootstrap];
    let mut wsum = vec![0.0; bootstrap];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = Poisson::new(1.0).unwrap();
    let n = samples[0].len();
    let mut terms: Vec<Vec<Complex64>> = plain.clone();
    let mut weights = vec![0.0; bootstrap];
    for i in 0..n {
        for (s, (set, pts)) in samples.iter().zip(points).enumerate() {
            for (j, t) in pts.iter().enumerate() {
                terms[s][j] = char_term(*t, set[i]);
            }
        }
        for w in weights.iter_mut() {
            *w = poisson.sample(&mut rng);
        }
        for (s, row) in terms.iter().enumerate() {
            for (j, term) in row.iter().enumerate() {
                plain[s][j] += term;
                for b in 0..bootstrap {
                    boot[b][s][j] += weights[b] * term;
                }
            }
        }
        for b in 0..bootstrap {
            wsum[b] += weights[b];
        }
    }
    for row in plain.iter_mut() {
        row.iter_mut().for_each(|z| *z /= n as f64);
    }
    for (b, sets) in boot.iter_mut().enumerate() {
        let w = wsum[b].max(1.0);
        for row in sets.iter_mut() {
            row.iter_mut().for_each(|z| *z /= w);
        }
    }
    (plain, boot)
}

fn floor_of(reps: &[f64]) -> (f64, f64) {
    if reps.is_empty() {
        return (0.0, 0.0);
    }
    let m = reps.iter().sum::<f64>() / reps.len() as f64;
    let v = reps.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (reps.len().max(2) - 1) as f64;
    (m, v.sqrt())
}

/// `max_{1≤m≤m_max, t} |φ̂(t) − φ̂(e^{iβm}t)|` for the empirical characteristic
/// function of `samples`.
pub fn rotation_invariance_stat(
    samples: &[Complex64],
    beta: Angle,
    t_grid: &[Complex64],
    m_max: usize,
    bootstrap: usize,
    seed: u64,
) -> Result<StructureStat, DiagnosticsError> {
    if samples.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples);
    }
    let mut points = t_grid.to_vec();
    for m in 1..=m_max {
        let r = beta.times(m as i64).cis();
        points.extend(t_grid.iter().map(|t| r * t));
    }
    let (plain, boot) = bootstrap_ecf(&[samples], &[points], bootstrap, seed);
    let nt = t_grid.len();
    let delta = |phi: &[Complex64]| -> Vec<Complex64> {
        (1..=m_max)
            .flat_map(|m| (0..nt).map(move |j| (m, j)))
            .map(|(m, j)| phi[j] - phi[m * nt + j])
            .collect()
    };
    let d0 = delta(&plain[0]);
    let value = d0.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let reps: Vec<f64> = boot
        .iter()
        .map(|b| {
            delta(&b[0])
                .iter()
                .zip(&d0)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max)
        })
        .collect();
    let (noise_floor, noise_se) = floor_of(&reps);
    Ok(StructureStat {
        value,
        noise_floor,
        noise_se,
        samples: samples.len(),
    })
}

/// `max_t |φ̂_n(t) − φ̂_{n/2}(2^{−1/2}t)²|`; `at_n[i]` and `at_half[i]` must
/// come from the same replica.
pub fn divisibility_stat(
    at_n: &[Complex64],
    at_half: &[Complex64],
    t_grid: &[Complex64],
    bootstrap: usize,
    seed: u64,
) -> Result<StructureStat, DiagnosticsError> {
    if at_n.len() != at_half.len() {
        return Err(DiagnosticsError::MismatchedSamples(
            at_n.len(),
            at_half.len(),
        ));
    }
    if at_n.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples);
    }
    let shrunk: Vec<Complex64> = t_grid
        .iter()
        .map(|t| t * std::f64::consts::FRAC_1_SQRT_2)
        .collect();
    let (plain, boot) = bootstrap_ecf(
        &[at_n, at_half],
        &[t_grid.to_vec(), shrunk],
        bootstrap,
        seed,
    );
    let delta = |sets: &[Vec<Complex64>]| -> Vec<Complex64> {
        sets[0]
            .iter()
            .zip(&sets[1])
            .map(|(a, b)| a - b * b)
            .collect()
    };
    let d0 = delta(&plain);
    let value = d0.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let reps: Vec<f64> = boot
        .iter()
        .map(|b| {
            delta(b)
                .iter()
                .zip(&d0)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max)
        })
        .collect();
    let (noise_floor, noise_se) = floor_of(&reps);
    Ok(StructureStat {
        value,
        noise_floor,
        noise_se,
        samples: at_n.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fit {
    pub slope: f64,
    pub se: f64,
    pub points: usize,
}

impl Fit {
    fn from(f: LinearFit, points: usize) -> Self {
        Fit {
            slope: f.slope,
            se: f.slope_se,
            points,
        }
    }
}

/// Exponent of `E|S_n|²` by least squares on `(log n, log E|S_n|²)` over the
/// top half of the checkpoints.
pub fn growth_exponent(ens: &CheckpointEnsemble) -> Option<Fit> {
    let half = ens.checkpoints.len() / 2;
    let (xs, ys): (Vec<f64>, Vec<f64>) = ens.checkpoints[half..]
        .iter()
        .filter(|c| c.mean_abs2().value > 0.0)
        .map(|c| ((c.n as f64).ln(), (c.n as f64 * c.mean_abs2().value).ln()))
        .unzip();
    let w = vec![1.0; xs.len()];
    linear_fit(&xs, &ys, &w).map(|f| Fit::from(f, xs.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summability {
    pub eta: f64,
    /// Fitted decay exponent of `p̂(n)`; absent when no positive estimate
    /// falls in the fit range.
    pub gamma: Option<f64>,
    pub gamma_se: Option<f64>,
    pub fit_from: usize,
    pub fit_points: usize,
    /// `Σ_{k≤n} p̂(k)` at each checkpoint, unrecorded `k` filled by power-law
    /// interpolation.
    pub partial_sums: Vec<(usize, f64)>,
    /// `(S(N) − S(N/2)) / S(N)` for the last checkpoint `N`.
    pub last_octave_fraction: f64,
    /// Every estimate in the fit range is zero.
    pub infinite_decay: bool,
    /// `γ > 1` at the configured confidence, or infinite decay.
    pub summable: bool,
}

/// Summability of `n ↦ p̂(n)` from estimates at increasing checkpoints.
pub fn transience_summability(
    ns: &[usize],
    p: &[Estimate],
    eta: f64,
    fit_from: usize,
    significance: f64,
) -> Summability {
    let mut partial_sums = Vec::with_capacity(ns.len());
    let mut sum = 0.0;
    let mut next = 1usize;
    let n_last = *ns.last().unwrap_or(&0);
    let mut at_half = 0.0;
    let half = n_last / 2;
    let mut add = |k: usize, v: f64, sum: &mut f64| {
        *sum += v;
        if k == half {
            at_half = *sum;
        }
    };
    for (i, (&n, est)) in ns.iter().zip(p).enumerate() {
        while next < n {
            let v = if i == 0 {
                est.value
            } else {
                let (a, pa, pb) = (ns[i - 1] as f64, p[i - 1].value, est.value);
                let k = next as f64;
                if pa > 0.0 && pb > 0.0 {
                    let w = (k / a).ln() / (n as f64 / a).ln();
                    (pa.ln() + w * (pb.ln() - pa.ln())).exp()
                } else {
                    pa + (k - a) / (n as f64 - a) * (pb - pa)
                }
            };
            add(next, v, &mut sum);
            next += 1;
        }
        add(n, est.value, &mut sum);
        next = n + 1;
        partial_sums.push((n, sum));
    }
    let last_octave_fraction = if sum > 0.0 {
        (sum - at_half) / sum
    } else {
        0.0
    };

    let in_range: Vec<(usize, &Estimate)> = ns
        .iter()
        .copied()
        .zip(p)
        .filter(|(n, _)| *n >= fit_from)
        .collect();
    let positive: Vec<&(usize, &Estimate)> = in_range
        .iter()
        .filter(|(_, e)| e.value > 0.0 && e.se > 0.0)
        .collect();
    let infinite_decay = !in_range.is_empty() && in_range.iter().all(|(_, e)| e.value == 0.0);
    let xs: Vec<f64> = positive.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = positive.iter().map(|(_, e)| e.value.ln()).collect();
    let ws: Vec<f64> = positive
        .iter()
        .map(|(_, e)| (e.value / e.se).powi(2))
        .collect();
    let fit = linear_fit(&xs, &ys, &ws);
    let z = normal_upper_quantile(significance);
    let summable = infinite_decay || fit.is_some_and(|f| -f.slope - z * f.slope_se > 1.0);
    Summability {
        eta,
        gamma: fit.map(|f| -f.slope),
        gamma_se: fit.map(|f| f.slope_se),
        fit_from,
        fit_points: xs.len(),
        partial_sums,
        last_octave_fraction,
        infinite_decay,
        summable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRow {
    pub n: usize,
    pub rotation: f64,
    pub rotation_residue: Option<u64>,
    pub mean_abs2_scaled: f64,
    pub mean_abs2_scaled_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallBallRow {
    pub n: usize,
    pub eta: f64,
    pub p_hat: f64,
    pub se: f64,
    pub replicas: usize,
    pub tau: f64,
    pub tau_mode: TauMode,
    pub c_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnscaledRow {
    pub n: usize,
    pub eta: f64,
    pub p_hat: f64,
    pub se: f64,
    pub estimator: &'static str,
    pub mean_returns: f64,
    pub mean_returns_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivisibilityReport {
    pub n: usize,
    pub half: usize,
    #[serde(flatten)]
    pub stat: StructureStat,
    /// False when the variance growth exponent is not close to 1.
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CesaroFunctionals {
    /// `max_η τ_n(B_η)/η²` across the window.
    pub sup_ratio: Vec<(usize, f64)>,
    /// No value exceeds `blowup ×` the window median.
    pub sup_ratio_bounded: bool,
    /// `τ_N(B_η)/η²` at the last checkpoint, in grid order.
    pub ratio_at_last: Vec<(f64, f64)>,
    /// The ratio at the smallest η is below the ratio at the largest.
    pub decreasing_as_eta_shrinks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailReturns {
    pub eta: f64,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub phase_convention: &'static str,
    pub beta: String,
    pub n_max: usize,
    pub replicas: usize,
    pub truncated: bool,
    pub eta_grid: Vec<f64>,
    pub thresholds: Thresholds,
    pub rounding_bound: f64,
    pub checkpoints: Vec<CheckpointRow>,
    pub small_ball: Vec<SmallBallRow>,
    pub unscaled: Vec<UnscaledRow>,
    pub window: (usize, usize),
    pub recurrence_constant: Vec<RecurrenceConstant>,
    pub tail_returns: Vec<TailReturns>,
    pub growth_exponent: Option<Fit>,
    pub rotation_invariance: Option<StructureStat>,
    pub divisibility: Option<DivisibilityReport>,
    pub summability: Vec<Summability>,
    pub cesaro: CesaroFunctionals,
    pub scaled_collapse: bool,
    pub label: Label,
    pub reasons: Vec<String>,
}

impl DiagnosticsReport {
    /// Small-ball table with columns `n,eta,p_hat,se,tau,c_hat`.
    pub fn to_csv(&self, header_comment: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = header_comment {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str("n,eta,p_hat,se,tau,c_hat\n");
        for r in &self.small_ball {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.n, r.eta, r.p_hat, r.se, r.tau, r.c_hat
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summability_at(&self, eta: f64) -> Option<&Summability> {
        self.summability
            .iter()
            .find(|s| (s.eta - eta).abs() <= 1e-12)
    }

    pub fn c_hat_at(&self, eta: f64) -> Option<&RecurrenceConstant> {
        self.recurrence_constant
            .iter()
            .find(|c| (c.eta - eta).abs() <= 1e-12)
    }
}

/// All diagnostics of an ensemble; `seed` drives the bootstrap.
pub fn analyze(
    ens: &CheckpointEnsemble,
    th: &Thresholds,
    seed: u64,
) -> Result<DiagnosticsReport, DiagnosticsError> {
    let ne = ens.eta_grid.len();
    let ns: Vec<usize> = ens.checkpoints.iter().map(|c| c.n).collect();
    let last = *ns.last().unwrap();
    let z = normal_upper_quantile(th.significance);

    let mut small_ball = Vec::new();
    let mut taus: Vec<Vec<f64>> = Vec::with_capacity(ne);
    for e in 0..ne {
        let eta = ens.eta_grid[e];
        let est: Vec<Estimate> = ens
            .checkpoints
            .iter()
            .map(|c| c.scaled_small_ball(e))
            .collect();
        let vals: Vec<f64> = est.iter().map(|x| x.value).collect();
        let t = tau_from_values(&ns, &vals);
        taus.push(t.iter().map(|x| x.0).collect());
        for ((&n, est), (tau, mode)) in ns.iter().zip(&est).zip(t) {
            small_ball.push(SmallBallRow {
                n,
                eta,
                p_hat: est.value,
                se: est.se,
                replicas: ens.replicas,
                tau,
                tau_mode: mode,
                c_hat: est.value / (eta * eta),
            });
        }
    }
    small_ball.sort_by(|a, b| a.n.cmp(&b.n).then(a.eta.total_cmp(&b.eta)));

    let mut unscaled = Vec::new();
    for c in &ens.checkpoints {
        for e in 0..ne {
            let p = c.unscaled_small_ball(e);
            let r = c.mean_returns(e);
            unscaled.push(UnscaledRow {
                n: c.n,
                eta: ens.eta_grid[e],
                p_hat: p.value,
                se: p.se,
                estimator: if c.conditional.is_some() {
                    "conditional"
                } else {
                    "indicator"
                },
                mean_returns: r.value,
                mean_returns_se: r.se,
            });
        }
    }

    let lo = (last / th.window_divisor.max(1)).max(1);
    let win: Vec<usize> = (0..ns.len()).filter(|&i| ns[i] >= lo).collect();
    let win_ns: Vec<usize> = win.iter().map(|&i| ns[i]).collect();
    let mut recurrence = Vec::with_capacity(ne);
    for e in 0..ne {
        let est: Vec<Estimate> = win
            .iter()
            .map(|&i| ens.checkpoints[i].scaled_small_ball(e))
            .collect();
        recurrence.push(recurrence_constant(
            &win_ns,
            &est,
            ens.eta_grid[e],
            th.significance,
        )?);
    }

    let tail_returns: Vec<TailReturns> = (0..ne)
        .map(|e| {
            let t = ens.tail_returns(e);
            TailReturns {
                eta: ens.eta_grid[e],
                mean: t.value,
                se: t.se,
            }
        })
        .collect();

    let growth = growth_exponent(ens);
    let rotation_invariance = match ens.samples(last) {
        Ok(s) => Some(rotation_invariance_stat(
            s,
            ens.beta.angle(),
            &ens.t_grid,
            th.m_max,
            th.bootstrap,
            seed,
        )?),
        Err(_) => None,
    };
    let divisibility = ns
        .iter()
        .rev()
        .find(|&&n| n >= 2 && ns.binary_search(&(n / 2)).is_ok())
        .and_then(|&n| {
            let (a, b) = (ens.samples(n).ok()?, ens.samples(n / 2).ok()?);
            Some((n, a, b))
        })
        .map(|(n, a, b)| {
            divisibility_stat(a, b, &ens.t_grid, th.bootstrap, seed.wrapping_add(1)).map(|stat| {
                DivisibilityReport {
                    n,
                    half: n / 2,
                    stat,
                    reliable: growth.is_some_and(|g| (g.slope - 1.0).abs() <= 0.1),
                }
            })
        })
        .transpose()?;

    let fit_from = (last / th.fit_divisor.max(1)).max(16);
    let summability: Vec<Summability> = (0..ne)
        .map(|e| {
            let est: Vec<Estimate> = ens
                .checkpoints
                .iter()
                .map(|c| c.unscaled_small_ball(e))
                .collect();
            transience_summability(&ns, &est, ens.eta_grid[e], fit_from, th.significance)
        })
        .collect();

    let sup_ratio: Vec<(usize, f64)> = win
        .iter()
        .map(|&i| {
            let m = (0..ne)
                .map(|e| taus[e][i] / ens.eta_grid[e].powi(2))
                .fold(0.0, f64::max);
            (ns[i], m)
        })
        .collect();
    let mut sorted: Vec<f64> = sup_ratio.iter().map(|x| x.1).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let ratio_at_last: Vec<(f64, f64)> = (0..ne)
        .map(|e| {
            (
                ens.eta_grid[e],
                taus[e][ns.len() - 1] / ens.eta_grid[e].powi(2),
            )
        })
        .collect();
    let cesaro = CesaroFunctionals {
        sup_ratio_bounded: sorted.iter().all(|&v| v <= th.blowup * median),
        decreasing_as_eta_shrinks: ratio_at_last[0].1 < ratio_at_last[ne - 1].1,
        sup_ratio,
        ratio_at_last,
    };
    let scaled_collapse = ens.checkpoints.last().unwrap().mean_abs2().value < th.collapse;

    let small_etas: Vec<usize> = {
        let v: Vec<usize> = (0..ne).filter(|&e| ens.eta_grid[e] < 0.5).collect();
        if v.is_empty() {
            (0..ne).collect()
        } else {
            v
        }
    };
    let top = ne - 1;
    let mut reasons = Vec::new();
    let c_above = small_etas.iter().all(|&e| recurrence[e].c_hat > th.c_min);
    let c_below = small_etas.iter().all(|&e| recurrence[e].c_hat < th.c_min);
    let returns_grow = tail_returns[top].mean - z * tail_returns[top].se > 0.0;
    let summable = summability[top].summable;
    reasons.push(format!(
        "c_hat over eta<0.5: {:?} (threshold {})",
        small_etas
            .iter()
            .map(|&e| recurrence[e].c_hat)
            .collect::<Vec<_>>(),
        th.c_min
    ));
    reasons.push(format!(
        "returns to |S_k|<={} in the last octave: {} +/- {}",
        ens.eta_grid[top], tail_returns[top].mean, tail_returns[top].se
    ));
    reasons.push(format!(
        "summability at eta={}: gamma={:?} +/- {:?}, infinite_decay={}",
        ens.eta_grid[top],
        summability[top].gamma,
        summability[top].gamma_se,
        summability[top].infinite_decay
    ));
    let label = if last < th.min_n_max {
        reasons.push(format!("n_max {last} is below {}", th.min_n_max));
        Label::Inconclusive
    } else if c_above && returns_grow {
        Label::RecurrenceEvidence
    } else if summable && c_below {
        Label::TransienceEvidence
    } else {
        Label::Inconclusive
    };

    Ok(DiagnosticsReport {
        schema_version: SCHEMA_VERSION,
        phase_convention: PHASE_CONVENTION,
        beta: ens.beta.to_string(),
        n_max: ens.n_max,
        replicas: ens.replicas,
        truncated: ens.truncated,
        eta_grid: ens.eta_grid.clone(),
        thresholds: *th,
        rounding_bound: ens.rounding_bound(),
        checkpoints: ens
            .checkpoints
            .iter()
            .map(|c| {
                let m = c.mean_abs2();
                CheckpointRow {
                    n: c.n,
                    rotation: c.rotation.radians(),
                    rotation_residue: c.rotation_residue,
                    mean_abs2_scaled: m.value,
                    mean_abs2_scaled_se: m.se,
                }
            })
            .collect(),
        small_ball,
        unscaled,
        window: (lo, last),
        recurrence_constant: recurrence,
        tail_returns,
        growth_exponent: growth,
        rotation_invariance,
        divisibility,
        summability,
        cesaro,
        scaled_collapse,
        label,
        reasons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::{golden_mean_chain, Field, IidLaw, MeasureSpec, ProcessSpec};
    use crate::walk::{ecf_t_grid, simulate, Beta, WalkConfig};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian() -> ProcessSpec {
        ProcessSpec::iid(IidLaw::ComplexGaussian { variance: 1.0 })
    }

    fn complex_normals(n: usize, sd: f64, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Complex64::new(a, b) * sd
            })
            .collect()
    }

    #[test]
    fn small_ball_trivial_cases() {
        let spec = ProcessSpec::iid(IidLaw::UniformCircle);
        let cfg = WalkConfig::new(Beta::radians(1.0), 16, 500, 1).with_eta_grid(vec![0.5, 100.0]);
        let ens = simulate(&spec, &cfg).unwrap();
        assert_eq!(small_ball(&ens, 1, 0.5).unwrap().value, 0.0);
        assert_eq!(small_ball(&ens, 16, 100.0).unwrap().value, 1.0);
        assert!(matches!(
            small_ball(&ens, 16, 0.3),
            Err(DiagnosticsError::UnknownEta(_))
        ));
        assert!(small_ball(&ens, 5, 0.5).is_err());
    }

    #[test]
    fn small_ball_gaussian_rayleigh() {
        let cfg = WalkConfig::new(Beta::radians(1.0), 1024, 20_000, 2);
        let ens = simulate(&gaussian(), &cfg).unwrap();
        let p = small_ball(&ens, 1024, 0.3).unwrap();
        let exact = 1.0 - (-0.09f64).exp();
        assert!((p.value - exact).abs() < 4.0 * p.se, "{p:?} vs {exact}");
    }

    #[test]
    fn tau_arithmetic() {
        let t = tau_from_values(&[1, 2, 3, 4], &[1.0, 0.5, 1.0 / 3.0, 0.25]);
        assert_abs_diff_eq!(
            t[3].0,
            (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0,
            epsilon = 1e-15
        );
        assert_eq!(t[3].1, TauMode::Dense);
        let t = tau_from_values(&[1, 4, 16, 64], &[0.3; 4]);
        for (i, (v, mode)) in t.into_iter().enumerate() {
            assert_abs_diff_eq!(v, 0.3, epsilon = 1e-15);
            assert_eq!(
                mode,
                if i == 0 {
                    TauMode::Dense
                } else {
                    TauMode::Grid
                }
            );
        }
        assert_eq!(tau_from_values(&[1, 2], &[0.1, 0.2])[1].1, TauMode::Dense);
    }

    #[test]
    fn tau_grid_matches_dense() {
        let cfg = WalkConfig::new(Beta::radians(1.0), 4096, 2000, 3)
            .dense()
            .with_sample_cap(0);
        let ens = simulate(&gaussian(), &cfg).unwrap();
        let (dense, mode) = tau(&ens, 4096, 0.5).unwrap();
        assert_eq!(mode, TauMode::Dense);
        // literal Cesàro average
        let lit: f64 = ens
            .checkpoints
            .iter()
            .map(|c| c.scaled_small_ball(4).value)
            .sum::<f64>()
            / 4096.0;
        assert_eq!(dense, lit);
        let grid = crate::spectral::geometric_grid(4096);
        let vals: Vec<f64> = grid
            .iter()
            .map(|&n| ens.checkpoint(n).unwrap().scaled_small_ball(4).value)
            .collect();
        let (g, mode) = *tau_from_values(&grid, &vals).last().unwrap();
        assert_eq!(mode, TauMode::Grid);
        assert!((g - dense).abs() < 0.05 * dense, "{g} vs {dense}");
    }

    #[test]
    fn recurrence_constant_examples() {
        assert!(recurrence_constant(&[], &[], 0.1, 1e-3).is_err());
        let cfg = WalkConfig::new(Beta::radians(1.0), 1024, 20_000, 4);
        let ens = simulate(&gaussian(), &cfg).unwrap();
        let r = analyze(&ens, &Thresholds::default(), 1).unwrap();
        for eta in [0.1, 0.2, 0.3] {
            let c = r.c_hat_at(eta).unwrap();
            let oracle = (1.0 - (-eta * eta).exp()) / (eta * eta);
            assert!((c.c_hat - oracle).abs() < 0.15, "{eta}: {c:?}");
            assert!(c.c_lower <= c.c_hat);
        }
    }

    #[test]
    fn point_mass_spectrum_has_zero_constant() {
        // σ_n² = n² at the atom, so the scaled walk leaves every ball
        let spec =
            ProcessSpec::gaussian_spectral(MeasureSpec::atom(1.0, 1.0), 1024, Field::Complex);
        let cfg = WalkConfig::new(Beta::radians(1.0), 1024, 2000, 5);
        let r = analyze(&simulate(&spec, &cfg).unwrap(), &Thresholds::default(), 1).unwrap();
        assert!(
            r.recurrence_constant.iter().all(|c| c.c_hat < 0.05),
            "{:?}",
            r.recurrence_constant
        );
    }

    #[test]
    fn rotation_stat_symmetric_and_skewed() {
        let t = ecf_t_grid();
        let base = complex_normals(2000, 1.0, 1);
        let paired: Vec<Complex64> = base
            .iter()
            .flat_map(|&z| (0..4).map(move |k| z * Complex64::i().powi(k)))
            .collect();
        let s = rotation_invariance_stat(
            &paired,
            Angle::new(std::f64::consts::FRAC_PI_2),
            &t,
            4,
            8,
            1,
        )
        .unwrap();
        assert!(s.value < 1e-12, "{s:?}");
        let skew: Vec<Complex64> = (0..2000)
            .map(|i| Complex64::new(0.5 + i as f64 / 2000.0, 0.0))
            .collect();
        let s =
            rotation_invariance_stat(&skew, Angle::new(std::f64::consts::FRAC_PI_2), &t, 1, 8, 1)
                .unwrap();
        assert!(s.value > 0.5, "{s:?}");
        assert!(rotation_invariance_stat(&skew[..1], Angle::ZERO, &t, 1, 1, 1).is_err());
    }

    #[test]
    fn rotation_stat_gaussian_walk_within_noise() {
        let cfg =
            WalkConfig::new(Beta::radians(1.0), 1024, 5000, 6).with_checkpoints(vec![512, 1024]);
        let ens = simulate(&gaussian(), &cfg).unwrap();
        let s = rotation_invariance_stat(
            ens.samples(1024).unwrap(),
            Angle::new(1.0),
            &ens.t_grid,
            8,
            32,
            2,
        )
        .unwrap();
        assert!(s.within_noise(), "{s:?}");
        let d = divisibility_stat(
            ens.samples(1024).unwrap(),
            ens.samples(512).unwrap(),
            &ens.t_grid,
            32,
            3,
        )
        .unwrap();
        assert!(d.within_noise(), "{d:?}");
    }

    #[test]
    fn divisibility_exact_gaussians() {
        // the variance of n^{−1/2}S_n does not depend on n for a Gaussian limit
        let a = complex_normals(5000, std::f64::consts::FRAC_1_SQRT_2, 10);
        let b = complex_normals(5000, std::f64::consts::FRAC_1_SQRT_2, 11);
        let t = ecf_t_grid();
        let d = divisibility_stat(&a, &b, &t, 32, 1).unwrap();
        assert!(d.within_noise(), "{d:?}");
        assert!(divisibility_stat(&a, &b[..10], &t, 4, 1).is_err());
    }

    #[test]
    fn summability_synthetic_power_law() {
        let ns: Vec<usize> = crate::spectral::geometric_grid(8192);
        let est: Vec<Estimate> = ns
            .iter()
            .map(|&n| Estimate {
                value: (n as f64).powf(-1.5),
                se: 0.01 * (n as f64).powf(-1.5),
            })
            .collect();
        let s = transience_summability(&ns, &est, 0.5, 256, 1e-3);
        assert_abs_diff_eq!(s.gamma.unwrap(), 1.5, epsilon = 1e-9);
        assert!(s.summable);
        assert!(s.last_octave_fraction < 0.01);
        // power-law fill is exact for a power law: compare with the direct sum
        let direct: f64 = (1..=8192).map(|k| (k as f64).powf(-1.5)).sum();
        assert_abs_diff_eq!(
            s.partial_sums.last().unwrap().1,
            direct,
            epsilon = 1e-9 * direct
        );

        let flat: Vec<Estimate> = ns
            .iter()
            .map(|&n| Estimate {
                value: 0.3 / n as f64,
                se: 0.003 / n as f64,
            })
            .collect();
        let s = transience_summability(&ns, &flat, 0.5, 256, 1e-3);
        assert!(!s.summable);
        assert_abs_diff_eq!(s.gamma.unwrap(), 1.0, epsilon = 1e-9);

        let zeros: Vec<Estimate> = ns
            .iter()
            .map(|_| Estimate {
                value: 0.0,
                se: 0.0,
            })
            .collect();
        let s = transience_summability(&ns, &zeros, 0.5, 256, 1e-3);
        assert!(s.infinite_decay && s.summable && s.gamma.is_none());
    }

    #[test]
    fn classification() {
        let cfg = WalkConfig::new(Beta::radians(1.0), 4096, 10_000, 7);
        let r = analyze(
            &simulate(&gaussian(), &cfg).unwrap(),
            &Thresholds::default(),
            1,
        )
        .unwrap();
        assert_eq!(r.label, Label::RecurrenceEvidence, "{:?}", r.reasons);
        let g = r.summability_at(0.5).unwrap().gamma.unwrap();
        assert!((g - 1.0).abs() < 0.2, "{g}");
        assert!(!r.summability_at(0.5).unwrap().summable);
        let e = r.growth_exponent.unwrap();
        assert!((e.slope - 1.0).abs() < 0.05);

        let tiny = WalkConfig::new(Beta::radians(1.0), 16, 1000, 7);
        let r = analyze(
            &simulate(&gaussian(), &tiny).unwrap(),
            &Thresholds::default(),
            1,
        )
        .unwrap();
        assert_eq!(r.label, Label::Inconclusive);

        let sofic = ProcessSpec::MarkovChain(golden_mean_chain());
        let r = analyze(&simulate(&sofic, &cfg).unwrap(), &Thresholds::default(), 1).unwrap();
        assert_eq!(r.label, Label::RecurrenceEvidence, "{:?}", r.reasons);
    }

    #[test]
    fn report_serialization() {
        let cfg = WalkConfig::new(Beta::rational(1, 3).unwrap(), 256, 500, 8);
        let r = analyze(
            &simulate(&gaussian(), &cfg).unwrap(),
            &Thresholds::default(),
            1,
        )
        .unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["schema_version"], 1);
        assert_eq!(json["beta"], "2pi*1/3");
        assert!(json["label"].is_string());
        let csv = r.to_csv(Some("manifest_sha256=abc"));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# manifest_sha256=abc"));
        assert_eq!(lines.next(), Some("n,eta,p_hat,se,tau,c_hat"));
        assert_eq!(lines.count(), r.small_ball.len());
        for row in &r.small_ball {
            assert!((0.0..=1.0).contains(&row.p_hat));
        }
        for w in r.small_ball.windows(2) {
            if w[0].n == w[1].n {
                assert!(w[0].p_hat <= w[1].p_hat);
            }
        }
    }
}

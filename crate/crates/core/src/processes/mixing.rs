//! Empirical check of the mixing covariance bound
//! `|E(fg) − E(f)E(g)| ≤ 4α(n)·‖f − Ef‖∞‖g − Eg‖∞` for finitely dependent
//! processes, where `α(n) = 0` beyond the dependence range.

use num_complex::Complex64;

use super::{ProcessError, ProcessSpec};

/// A bounded test function of a finite window of increments.
pub type WindowFn<'a> = &'a (dyn Fn(&[Complex64]) -> f64 + Sync);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingCheck {
    /// Empirical `E(fg) − E(f)E(g)`.
    pub covariance: f64,
    pub se: f64,
    /// Bound implied by the mixing coefficient (zero beyond the dependence range).
    pub bound: f64,
}

impl MixingCheck {
    /// Whether the empirical covariance is within `bound + 4 SE`.
    pub fn holds(&self) -> bool {
        self.covariance.abs() <= self.bound + 4.0 * self.se
    }
}

/// `f` sees `X_0..X_{w−1}` (the past, ending at `w−1`), `g` sees the window
/// of length `w` starting `gap` steps after the end of the past window.
pub fn mixing_covariance_bound_check(
    spec: &ProcessSpec,
    gap: usize,
    window: usize,
    f: WindowFn<'_>,
    g: WindowFn<'_>,
    samples: usize,
    seed: u64,
) -> Result<MixingCheck, ProcessError> {
    let range = spec.dependence_range().ok_or_else(|| {
        ProcessError::NotApplicable("mixing bound check needs an iid or moving-average spec".into())
    })?;
    if gap <= range {
        return Err(ProcessError::NotApplicable(format!(
            "gap {gap} is within the dependence range {range}; alpha(gap) is not zero"
        )));
    }
    if window == 0 || samples < 2 {
        return Err(ProcessError::InvalidSpec(
            "window and samples must be positive".into(),
        ));
    }
    covariance_of_windows(spec, gap, window, f, g, samples, seed)
}

/// Empirical covariance of `f(past)` and `g(future)` over independent replicas,
/// without the applicability check (usable as a negative control).
pub(crate) fn covariance_of_windows(
    spec: &ProcessSpec,
    gap: usize,
    window: usize,
    f: WindowFn<'_>,
    g: WindowFn<'_>,
    samples: usize,
    seed: u64,
) -> Result<MixingCheck, ProcessError> {
    let prepared = spec.prepare()?;
    let len = 2 * window - 1 + gap;
    let mut fs = Vec::with_capacity(samples);
    let mut gs = Vec::with_capacity(samples);
    let mut buf = Vec::with_capacity(len);
    for i in 0..samples {
        let mut stream = prepared.stream(seed, i as u64);
        buf.clear();
        buf.extend((0..len).map(|_| stream.next_increment()));
        fs.push(f(&buf[..window]));
        gs.push(g(&buf[window - 1 + gap..window - 1 + gap + window]));
    }
    let n = samples as f64;
    let mf = fs.iter().sum::<f64>() / n;
    let mg = gs.iter().sum::<f64>() / n;
    let prods: Vec<f64> = fs
        .iter()
        .zip(&gs)
        .map(|(a, b)| (a - mf) * (b - mg))
        .collect();
    let cov = prods.iter().sum::<f64>() / n;
    let var = prods.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MixingCheck {
        covariance: cov,
        se: (var / n).sqrt(),
        bound: 0.0,
    })
}

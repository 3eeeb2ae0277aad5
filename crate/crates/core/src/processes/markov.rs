//! Finite-state Markov chains: validation, Parry (maximal-entropy) chains,
//! closed-form autocovariances and spectral densities.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{serde_complex, ProcessError};

const STOCHASTIC_TOL: f64 = 1e-12;

/// A stationary Markov chain emitting `values[state]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub transition: Vec<Vec<f64>>,
    /// Stationary distribution; solved for when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationary: Option<Vec<f64>>,
    #[serde(with = "serde_complex::vec")]
    pub values: Vec<Complex64>,
    /// Emit `values[s] − Σ π_t values[t]` so that increments have mean zero.
    #[serde(default = "default_true")]
    pub centered: bool,
}

fn default_true() -> bool {
    true
}

impl MarkovChain {
    /// Checks the matrix is row-stochastic and primitive, fills in and
    /// verifies the stationary vector.
    pub fn validated(mut self) -> Result<Self, ProcessError> {
        let s = self.transition.len();
        if s == 0 {
            return Err(ProcessError::InvalidSpec("empty transition matrix".into()));
        }
        if self.values.len() != s {
            return Err(ProcessError::InvalidSpec(format!(
                "{} states but {} values",
                s,
                self.values.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != s {
                return Err(ProcessError::InvalidSpec(format!(
                    "row {i} has length {}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(ProcessError::InvalidSpec(format!(
                    "row {i} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ProcessError::InvalidSpec(format!("row {i} sums to {sum}")));
            }
        }
        let support: Vec<Vec<bool>> = self
            .transition
            .iter()
            .map(|r| r.iter().map(|&p| p > 0.0).collect())
            .collect();
        if !is_primitive(&support) {
            return Err(ProcessError::InvalidSpec(
                "transition matrix is not irreducible and aperiodic".into(),
            ));
        }
        let pi = match self.stationary.take() {
            Some(pi) => pi,
            None => solve_stationary(&self.transition)?,
        };
        if pi.len() != s || pi.iter().any(|&p| !(p >= 0.0)) {
            return Err(ProcessError::InvalidSpec(
                "stationary vector malformed".into(),
            ));
        }
        if (pi.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
            return Err(ProcessError::InvalidSpec(
                "stationary vector does not sum to 1".into(),
            ));
        }
        for t in 0..s {
            let v: f64 = (0..s).map(|i| pi[i] * self.transition[i][t]).sum();
            if (v - pi[t]).abs() > STOCHASTIC_TOL {
                return Err(ProcessError::InvalidSpec(format!(
                    "stationary vector violates pi P = pi at state {t} by {:e}",
                    v - pi[t]
                )));
            }
        }
        self.stationary = Some(pi);
        Ok(self)
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn stationary_vec(&self) -> &[f64] {
        self.stationary
            .as_deref()
            .expect("validated chain has stationary vector")
    }

    pub fn mean(&self) -> Complex64 {
        self.stationary_vec()
            .iter()
            .zip(&self.values)
            .map(|(p, v)| *p * v)
            .sum()
    }

    /// Values actually emitted by the generator.
    pub fn emitted_values(&self) -> Vec<Complex64> {
        let mu = if self.centered {
            self.mean()
        } else {
            Complex64::new(0.0, 0.0)
        };
        self.values.iter().map(|v| v - mu).collect()
    }

    /// `r_k = Σ_{s,t} π_s conj(v_s) (P^k)_{st} v_t − |Σ π_s v_s|²`.
    pub fn covariance(&self, k: usize) -> Complex64 {
        let s = self.states();
        let pi = self.stationary_vec();
        // row vector a = (π_s conj v_s) P^k
        let mut a: Vec<Complex64> = (0..s).map(|i| pi[i] * self.values[i].conj()).collect();
        for _ in 0..k {
            let mut next = vec![Complex64::new(0.0, 0.0); s];
            for (ai, row) in a.iter().zip(&self.transition) {
                for (n, p) in next.iter_mut().zip(row) {
                    *n += ai * p;
                }
            }
            a = next;
        }
        let raw: Complex64 = a.iter().zip(&self.values).map(|(x, v)| x * v).sum();
        raw - self.mean().norm_sqr()
    }

    /// Spectral density `h(x) = Σ_k r_k e^{−ikx}` via the resolvent of `P − 1π`.
    pub fn spectral_density(&self, x: f64) -> f64 {
        let s = self.states();
        let pi = self.stationary_vec();
        let mu = self.mean();
        let q = DMatrix::from_fn(s, s, |i, j| {
            Complex64::new(self.transition[i][j] - pi[j], 0.0)
        });
        let w = DVector::from_fn(s, |i, _| pi[i] * self.values[i].conj());
        let v = DVector::from_fn(s, |i, _| self.values[i]);
        let z = Complex64::from_polar(1.0, -x);
        let a = DMatrix::<Complex64>::identity(s, s) - q * z;
        let y = a
            .lu()
            .solve(&v)
            .expect("I - zQ is invertible for a primitive chain");
        // Σ_{k≥1} r_k z^k = w*(y − v)
        let tail: Complex64 = w
            .iter()
            .zip(y.iter().zip(v.iter()))
            .map(|(wi, (yi, vi))| wi * (yi - vi))
            .sum();
        let r0 = self
            .values
            .iter()
            .zip(pi)
            .map(|(v, p)| p * v.norm_sqr())
            .sum::<f64>()
            - mu.norm_sqr();
        r0 + 2.0 * tail.re
    }
}

fn solve_stationary(p: &[Vec<f64>]) -> Result<Vec<f64>, ProcessError> {
    let s = p.len();
    // (Pᵀ − I) π = 0 with the last equation replaced by Σ π = 1
    let mut a = DMatrix::from_fn(s, s, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    let mut b = DVector::zeros(s);
    for j in 0..s {
        a[(s - 1, j)] = 1.0;
    }
    b[s - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| ProcessError::InvalidSpec("stationary distribution is not unique".into()))?;
    // clip round-off negatives and renormalize
    let mut pi: Vec<f64> = pi.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    Ok(pi)
}

fn bool_mul(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).any(|k| a[i][k] && b[k][j])).collect())
        .collect()
}

/// Irreducible and aperiodic, i.e. some power is strictly positive. By
/// Wielandt's bound it suffices to check the power `(n−1)² + 1`.
pub fn is_primitive(support: &[Vec<bool>]) -> bool {
    let n = support.len();
    if n == 0 {
        return false;
    }
    let mut e = (n - 1) * (n - 1) + 1;
    let mut base = support.to_vec();
    let mut acc: Option<Vec<Vec<bool>>> = None;
    while e > 0 {
        if e & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(m) => bool_mul(&m, &base),
            });
        }
        e >>= 1;
        if e > 0 {
            base = bool_mul(&base, &base);
        }
    }
    acc.map(|m| m.iter().all(|r| r.iter().all(|&b| b)))
        .unwrap_or(false)
}

/// Every state reaches every other state.
pub fn is_irreducible(support: &[Vec<bool>]) -> bool {
    let n = support.len();
    (0..n).all(|start| {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if support[i][j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&b| b)
    })
}

/// Perron eigenvalue and right/left eigenvectors of a primitive nonnegative matrix.
pub fn perron_pair(a: &[Vec<f64>]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = a.len();
    let power = |transpose: bool| {
        let mut v = vec![1.0 / n as f64; n];
        let mut lambda = 0.0;
        for _ in 0..100_000 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    let aij = if transpose { a[j][i] } else { a[i][j] };
                    w[i] += aij * v[j];
                }
            }
            let norm: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= norm);
            let diff: f64 = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
            v = w;
            lambda = norm;
            if diff < 1e-16 {
                break;
            }
        }
        (lambda, v)
    };
    let (lambda, right) = power(false);
    let (_, left) = power(true);
    (lambda, right, left)
}

/// The Parry measure of a shift of finite type as a Markov chain:
/// `p_st = A_st v_t / (λ v_s)` and `π_s ∝ u_s v_s`.
pub fn parry_chain(
    adjacency: &[Vec<u8>],
    values: Vec<Complex64>,
) -> Result<MarkovChain, ProcessError> {
    let n = adjacency.len();
    if n == 0 || adjacency.iter().any(|r| r.len() != n) {
        return Err(ProcessError::InvalidSpec(
            "adjacency must be a nonempty square matrix".into(),
        ));
    }
    if adjacency.iter().flatten().any(|&x| x > 1) {
        return Err(ProcessError::InvalidSpec(
            "adjacency entries must be 0 or 1".into(),
        ));
    }
    let support: Vec<Vec<bool>> = adjacency
        .iter()
        .map(|r| r.iter().map(|&x| x == 1).collect())
        .collect();
    if !is_irreducible(&support) {
        return Err(ProcessError::InvalidSpec(
            "adjacency matrix is reducible".into(),
        ));
    }
    if !is_primitive(&support) {
        return Err(ProcessError::InvalidSpec(
            "adjacency matrix is periodic".into(),
        ));
    }
    let a: Vec<Vec<f64>> = adjacency
        .iter()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    let (lambda, v, u) = perron_pair(&a);
    let mut transition: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..n).map(|t| a[s][t] * v[t] / (lambda * v[s])).collect())
        .collect();
    // remove the last bits of round-off so rows sum to one
    for row in &mut transition {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= sum);
    }
    let mut pi: Vec<f64> = (0..n).map(|s| u[s] * v[s]).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    MarkovChain {
        transition,
        stationary: Some(pi),
        values,
        centered: true,
    }
    .validated()
}

/// The golden-mean shift on `{a, b}` (word `bb` forbidden) with `a ↦ +1`, `b ↦ −1`.
pub fn golden_mean_chain() -> MarkovChain {
    parry_chain(
        &[vec![1, 1], vec![1, 0]],
        vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
    )
    .expect("golden-mean adjacency is primitive")
}

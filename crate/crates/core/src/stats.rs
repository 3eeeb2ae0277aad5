//! Small numerical helpers shared by the spectral and diagnostics code.

use num_complex::Complex64;
use statrs::distribution::{ContinuousCDF, Normal};

/// Neumaier-compensated accumulator. Partitioning of the input does not
/// change the result beyond the last bit of the running compensation.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ComplexKahanSum {
    re: KahanSum,
    im: KahanSum,
}

impl ComplexKahanSum {
    pub fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = KahanSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Least-squares line `y = intercept + slope·x` with the slope's standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Weighted least squares; weights are inverse variances (pass 1.0 for OLS).
pub fn linear_fit(xs: &[f64], ys: &[f64], weights: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n || weights.len() != n {
        return None;
    }
    let sw: f64 = weights.iter().sum();
    let mx = xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        sxx += weights[i] * dx * dx;
        sxy += weights[i] * dx * (ys[i] - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = (0..n)
            .map(|i| weights[i] * (ys[i] - intercept - slope * xs[i]).powi(2))
            .sum();
        (rss / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(LinearFit {
        slope,
        intercept,
        slope_se,
    })
}

/// Upper `alpha` quantile of the standard normal.
pub fn normal_upper_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha)
}

/// Binomial standard error `√(p(1−p)/n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

/// Mean and standard error from a running sum and sum of squares.
pub fn mean_se(sum: f64, sumsq: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let mean = sum / nf;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = ((sumsq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` (Newton on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Quadrature for `P(|c + G| ≤ r)` with `G ~ N(0, Σ)` on ℝ² ≅ ℂ.
#[derive(Debug, Clone)]
pub struct DiskRule {
    radial: Vec<(f64, f64)>,
    angular: Vec<Complex64>,
}

impl DiskRule {
    /// `radial` Gauss–Legendre nodes in the radius, `angular` equispaced angles.
    pub fn new(radial: usize, angular: usize) -> Self {
        let (x, w) = gauss_legendre(radial);
        let radial = x
            .iter()
            .zip(&w)
            .map(|(x, w)| ((x + 1.0) / 2.0, w / 2.0))
            .collect();
        let angular = (0..angular)
            .map(|j| Complex64::from_polar(1.0, std::f64::consts::TAU * j as f64 / angular as f64))
            .collect();
        DiskRule { radial, angular }
    }

    /// `cov = [Σ₁₁, Σ₁₂, Σ₂₂]`, positive definite. Points farther than
    /// `r + 9·√λ_max` from the origin give exactly zero.
    pub fn probability(&self, center: Complex64, cov: [f64; 3], r: f64) -> f64 {
        let [a, b, c] = cov;
        let det = a * c - b * b;
        let lmax = 0.5 * (a + c) + (0.25 * (a - c).powi(2) + b * b).sqrt();
        if center.norm() > r + 9.0 * lmax.sqrt() {
            return 0.0;
        }
        let (ia, ib, ic) = (c / det, -b / det, a / det);
        let norm = 1.0 / (std::f64::consts::TAU * det.sqrt());
        let dtheta = std::f64::consts::TAU / self.angular.len() as f64;
        let mut total = 0.0;
        for &(u, wu) in &self.radial {
            let rho = r * u;
            let mut ring = 0.0;
            for e in &self.angular {
                let x = center.re + rho * e.re;
                let y = center.im + rho * e.im;
                ring += (-0.5 * (ia * x * x + 2.0 * ib * x * y + ic * y * y)).exp();
            }
            total += wu * rho * ring;
        }
        (total * r * dtheta * norm).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(kahan_sum(xs), 2.0);
    }

    #[test]
    fn fit_recovers_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 1.5 * x).collect();
        let fit = linear_fit(&xs, &ys, &[1.0; 10]).unwrap();
        assert!((fit.slope + 1.5).abs() < 1e-12);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert!(fit.slope_se < 1e-10);
        assert!(linear_fit(&[1.0], &[1.0], &[1.0]).is_none());
    }

    #[test]
    fn quantile() {
        assert!((normal_upper_quantile(0.025) - 1.959964).abs() < 1e-5);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in [1, 2, 5, 8] {
            let (x, w) = gauss_legendre(n);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
            for deg in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 {
                    0.0
                } else {
                    2.0 / (deg as f64 + 1.0)
                };
                assert_abs_diff_eq!(q, exact, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn disk_probability_against_rayleigh() {
        let rule = DiskRule::new(8, 16);
        for (s2, r) in [(1.0, 0.5), (4.0, 0.5), (100.0, 0.05), (0.25, 0.5)] {
            let p = rule.probability(Complex64::new(0.0, 0.0), [s2, 0.0, s2], r);
            let exact = 1.0 - (-r * r / (2.0 * s2)).exp();
            assert_relative_eq!(p, exact, max_relative = 1e-9);
        }
    }

    #[test]
    fn disk_probability_off_center_against_fine_rule() {
        let coarse = DiskRule::new(8, 16);
        let fine = DiskRule::new(48, 256);
        let cov = [3.0, 0.7, 1.5];
        for c in [
            Complex64::new(0.3, -0.2),
            Complex64::new(2.0, 1.0),
            Complex64::new(-4.0, 3.0),
        ] {
            let p = coarse.probability(c, cov, 0.5);
            let q = fine.probability(c, cov, 0.5);
            assert_relative_eq!(p, q, max_relative = 1e-8);
        }
        assert_eq!(
            coarse.probability(Complex64::new(100.0, 0.0), cov, 0.5),
            0.0
        );
    }
}

use super::*;
use crate::spectral::{empirical_autocovariance, half_power_coefficients};
use approx::assert_abs_diff_eq;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn take(stream: &mut IncrementStream, n: usize) -> Vec<Complex64> {
    (0..n).map(|_| stream.next_increment()).collect()
}

fn ma11() -> ProcessSpec {
    ProcessSpec::moving_average(vec![1.0.into(), 1.0.into()], Field::Real)
}

fn golden() -> ProcessSpec {
    ProcessSpec::MarkovChain(golden_mean_chain())
}

/// Mean of `X_{j+k} conj X_j` over independent replicas and all in-window
/// positions, with the SE taken across replicas.
fn replica_autocovariance(
    spec: &ProcessSpec,
    len: usize,
    replicas: usize,
    k_max: usize,
    seed: u64,
) -> (Vec<Complex64>, Vec<f64>) {
    let prepared = spec.prepare().unwrap();
    let mut per_rep: Vec<Vec<Complex64>> = vec![Vec::with_capacity(replicas); k_max + 1];
    for r in 0..replicas {
        let xs = take(&mut prepared.stream(seed, r as u64), len);
        for (k, slot) in per_rep.iter_mut().enumerate() {
            let s: Complex64 = (0..len - k).map(|j| xs[j + k] * xs[j].conj()).sum();
            slot.push(s / (len - k) as f64);
        }
    }
    let mut mean = Vec::new();
    let mut se = Vec::new();
    for v in per_rep {
        let m = v.iter().sum::<Complex64>() / replicas as f64;
        let var = v.iter().map(|z| (z - m).norm_sqr()).sum::<f64>() / (replicas as f64 - 1.0);
        mean.push(m);
        se.push((var / replicas as f64).sqrt());
    }
    (mean, se)
}

#[test]
fn rademacher_support() {
    let mut s = make_stream(&ProcessSpec::iid(IidLaw::Rademacher), 1).unwrap();
    for x in take(&mut s, 10_000) {
        assert!(x == Complex64::new(1.0, 0.0) || x == Complex64::new(-1.0, 0.0));
    }
}

#[test]
fn golden_mean_never_emits_forbidden_word() {
    let chain = golden_mean_chain();
    let b_value = chain.emitted_values()[1];
    let mut s = make_stream(&golden(), 7).unwrap();
    let mut prev_b = false;
    for x in take(&mut s, 1_000_000) {
        let is_b = x == b_value;
        assert!(!(prev_b && is_b), "forbidden word bb emitted");
        prev_b = is_b;
    }
}

#[test]
fn determinism_of_streams() {
    let specs = [
        ProcessSpec::iid(IidLaw::ComplexGaussian { variance: 2.0 }),
        ma11(),
        golden(),
        ProcessSpec::gaussian_spectral(MeasureSpec::singular_half_power(1.0), 512, Field::Real),
        ProcessSpec::Rotation {
            alpha: 2f64.sqrt(),
            fourier: vec![FourierTerm {
                index: 1,
                coeff: 1.0.into(),
            }],
        },
    ];
    for spec in specs {
        let a = take(&mut make_stream(&spec, 99).unwrap(), 10_000);
        let b = take(&mut make_stream(&spec, 99).unwrap(), 10_000);
        assert_eq!(a, b);
        let c = take(&mut make_stream(&spec, 100).unwrap(), 10);
        assert_ne!(a[..10], c[..]);
    }
}

#[test]
fn rotation_stream_is_a_character_orbit() {
    let alpha = 2f64.sqrt();
    let spec = ProcessSpec::Rotation {
        alpha,
        fourier: vec![FourierTerm {
            index: 1,
            coeff: 1.0.into(),
        }],
    };
    let xs = take(&mut make_stream(&spec, 11).unwrap(), 100_000);
    let theta0 = xs[0].arg();
    for (k, x) in xs.iter().enumerate().take(1000) {
        assert_abs_diff_eq!(x.norm(), 1.0, epsilon = 1e-12);
        let expect = Complex64::from_polar(1.0, theta0 + k as f64 * alpha);
        assert_abs_diff_eq!((x - expect).norm(), 0.0, epsilon = 1e-9);
    }
    let mean = xs.iter().sum::<Complex64>() / xs.len() as f64;
    assert!(mean.norm() < 0.02, "{mean}");
}

#[test]
fn closed_form_covariances() {
    let rad = ProcessSpec::iid(IidLaw::Rademacher);
    assert_eq!(rad.covariance(0).unwrap(), Complex64::new(1.0, 0.0));
    assert_eq!(rad.covariance(1).unwrap(), Complex64::new(0.0, 0.0));
    let ma = ma11();
    // convolution of coefficients: Σ_j θ_{j+k} θ_j
    for (k, expect) in [(0, 2.0), (1, 1.0), (2, 0.0)] {
        assert_eq!(ma.covariance(k).unwrap(), Complex64::new(expect, 0.0));
    }
    assert!(matches!(
        ma.covariance(-1),
        Err(ProcessError::NegativeLag(-1))
    ));
}

#[test]
fn golden_mean_empirical_autocovariance() {
    let spec = golden();
    let xs = take(&mut make_stream(&spec, 3).unwrap(), 10_000_000);
    let emp = empirical_autocovariance(&xs, 8).unwrap();
    for k in 0..=8 {
        let r = spec.covariance(k as i64).unwrap();
        let diff = (emp.r[k] - r).norm();
        assert!(
            diff <= 3.0 * emp.se[k],
            "k={k}: emp {} vs {r} (se {})",
            emp.r[k],
            emp.se[k]
        );
    }
}

#[test]
fn covariance_consistency_across_families() {
    let short = [
        ProcessSpec::iid(IidLaw::Rademacher),
        ProcessSpec::iid(IidLaw::UniformCircle),
        ProcessSpec::iid(IidLaw::ComplexGaussian { variance: 1.5 }),
        ma11(),
        ProcessSpec::moving_average(
            vec![
                Complex64::new(1.0, 0.5),
                Complex64::new(-0.3, 0.2),
                0.7.into(),
            ],
            Field::Complex,
        ),
        golden(),
    ];
    for spec in short {
        let xs = take(&mut make_stream(&spec, 21).unwrap(), 1_000_000);
        let emp = empirical_autocovariance(&xs, 16).unwrap();
        for k in 0..=16 {
            let r = spec.covariance(k as i64).unwrap();
            let tol = 3.0 * emp.se[k] + 1e-12;
            assert!(
                (emp.r[k] - r).norm() <= tol,
                "{spec:?} k={k}: {} vs {r}",
                emp.r[k]
            );
        }
    }
}

#[test]
fn white_noise_from_flat_spectrum() {
    let m = SpectralMeasure::flat(1.0, 1024).unwrap();
    let mut s = gaussian_from_spectral(&m, 4096, Field::Real, 5).unwrap();
    let xs = take(&mut s, 1_000_000);
    let emp = empirical_autocovariance(&xs, 1).unwrap();
    assert!((emp.r[0].re - 1.0).abs() < 3.0 * emp.se[0]);
    assert!(emp.r[1].norm() < 3.0 * emp.se[1], "{}", emp.r[1]);
}

#[test]
fn single_atom_gives_harmonic_covariance() {
    let w = 0.9;
    let spec = ProcessSpec::gaussian_spectral(MeasureSpec::atom(w, 1.0), 128, Field::Complex);
    let prepared = spec.prepare().unwrap();
    let replicas = 20_000;
    let mut acc = vec![Complex64::new(0.0, 0.0); 101];
    let mut acc_sq = vec![0.0; 101];
    for r in 0..replicas {
        let xs = take(&mut prepared.stream(8, r), 101);
        for k in 0..=100 {
            let p = xs[k] * xs[0].conj();
            acc[k] += p;
            acc_sq[k] += p.norm_sqr();
        }
    }
    for k in 0..=100 {
        let mean = acc[k] / replicas as f64;
        let se = ((acc_sq[k] / replicas as f64 - mean.norm_sqr()) / replicas as f64).sqrt();
        let expect = Complex64::from_polar(1.0, k as f64 * w);
        assert!(
            (mean - expect).norm() < 4.0 * se,
            "k={k}: {mean} vs {expect}"
        );
        assert!((mean.norm() - 1.0).abs() < 4.0 * se);
    }
}

#[test]
fn singular_half_power_gaussian_matches_covariance() {
    let beta0 = 1.0;
    let spec =
        ProcessSpec::gaussian_spectral(MeasureSpec::singular_half_power(beta0), 256, Field::Real);
    let (emp, se) = replica_autocovariance(&spec, 256, 4000, 32, 13);
    // independent closed form: γ_k cos(kβ₀) for the symmetrized measure
    let g = half_power_coefficients(32);
    for k in 0..=32 {
        let expect = g[k] * (k as f64 * beta0).cos();
        assert!(
            (emp[k].re - expect).abs() <= 3.0 * se[k],
            "k={k}: {} vs {expect} (se {})",
            emp[k].re,
            se[k]
        );
    }
}

#[test]
fn complex_gaussian_field_follows_asymmetric_measure() {
    let spec =
        ProcessSpec::gaussian_spectral(MeasureSpec::singular_half_power(2.0), 128, Field::Complex);
    let (emp, se) = replica_autocovariance(&spec, 128, 3000, 6, 17);
    for k in 0..=6 {
        let r = spec.covariance(k as i64).unwrap();
        assert!(
            (emp[k] - r).norm() <= 4.0 * se[k],
            "k={k}: {} vs {r}",
            emp[k]
        );
    }
}

#[test]
fn nugget_split_reduces_lag_zero_only() {
    let spec =
        ProcessSpec::gaussian_spectral(MeasureSpec::singular_half_power(1.0), 256, Field::Real);
    let plain = spec.prepare().unwrap();
    let split = spec.prepare_with_nugget(0.5).unwrap();
    assert_eq!(split.gaussian_plan().unwrap().nugget(), 0.5);
    assert_eq!(plain.gaussian_plan().unwrap().embedding_size(), 1024);
    let mut total = 0.0;
    let reps = 4000;
    for r in 0..reps {
        let xs = take(&mut split.stream(1, r), 16);
        total += xs.iter().map(|x| x.norm_sqr()).sum::<f64>() / 16.0;
    }
    let r0 = spec.covariance(0).unwrap().re;
    assert!(
        (total / reps as f64 - (r0 - 0.5)).abs() < 0.03,
        "{}",
        total / reps as f64
    );
    assert!(ma11().prepare_with_nugget(0.1).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(ProcessSpec::moving_average(vec![], Field::Real)
        .prepare()
        .is_err());
    assert!(
        ProcessSpec::moving_average(vec![Complex64::new(0.0, 1.0)], Field::Real)
            .prepare()
            .is_err()
    );
    assert!(
        ProcessSpec::gaussian_spectral(MeasureSpec::flat(0.0), 16, Field::Real)
            .prepare()
            .is_err()
    );
    assert!(
        ProcessSpec::gaussian_spectral(MeasureSpec::flat(1.0), 1, Field::Real)
            .prepare()
            .is_err()
    );
    let bad = ProcessSpec::MarkovChain(MarkovChain {
        transition: vec![vec![0.9, 0.2], vec![0.5, 0.5]],
        stationary: None,
        values: vec![1.0.into(), (-1.0).into()],
        centered: true,
    });
    assert!(matches!(bad.prepare(), Err(ProcessError::InvalidSpec(_))));
}

#[test]
fn json_surface() {
    let markov = r#"{"kind": "markov", "transition": [[0.5, 0.5], [1.0, 0.0]], "values": [1, -1]}"#;
    let spec = ProcessSpec::from_json(markov).unwrap();
    let ProcessSpec::MarkovChain(chain) = &spec else {
        panic!()
    };
    assert!(chain.centered);
    spec.prepare().unwrap();

    let gauss = r#"{"kind": "gaussian-spectral", "window": 64, "measure": {"density": "singular-half-power", "beta0": 1.0}}"#;
    let spec = ProcessSpec::from_json(gauss).unwrap();
    assert_eq!(
        spec,
        ProcessSpec::gaussian_spectral(MeasureSpec::singular_half_power(1.0), 64, Field::Real)
    );

    let flat = r#"{"kind": "gaussian-spectral", "window": 8, "field": "complex",
                   "measure": {"density": "flat", "level": 2.0, "atoms": [{"location": 0.5, "mass": 1.0}]}}"#;
    let spec = ProcessSpec::from_json(flat).unwrap();
    assert_abs_diff_eq!(spec.covariance(0).unwrap().re, 3.0, epsilon = 1e-12);

    let grid = r#"{"kind": "gaussian-spectral", "window": 8, "measure": {"density": "grid", "values": [1, 2, 3, 2]}}"#;
    ProcessSpec::from_json(grid).unwrap().prepare().unwrap();

    let ma = r#"{"kind": "moving-average", "coeffs": [1, [0.5, -0.5]], "field": "complex"}"#;
    let spec = ProcessSpec::from_json(ma).unwrap();
    assert_eq!(spec.covariance(1).unwrap(), Complex64::new(0.5, -0.5));

    let iid = r#"{"kind": "iid", "law": "complex-gaussian", "variance": 2.0}"#;
    assert_eq!(
        ProcessSpec::from_json(iid).unwrap(),
        ProcessSpec::iid(IidLaw::ComplexGaussian { variance: 2.0 })
    );

    let rot = r#"{"kind": "rotation", "alpha": 1.414, "fourier": [{"index": 1, "coeff": [0, 1]}]}"#;
    let spec = ProcessSpec::from_json(rot).unwrap();
    assert_eq!(ProcessSpec::from_json(&spec.to_json()).unwrap(), spec);

    assert!(ProcessSpec::from_json(r#"{"kind": "nope"}"#).is_err());
}

/// Chi-square homogeneity test of the sign pattern of `(X_k, X_{k+1})` over
/// two shifted windows; returns the p-value.
fn stationarity_p_value(xs: &[Complex64], shift: usize, len: usize) -> f64 {
    let cell = |a: Complex64, b: Complex64| {
        let bit = |v: f64| usize::from(v > 0.0);
        bit(a.re) | bit(b.re) << 1 | bit(a.im) << 2 | bit(b.im) << 3
    };
    let mut counts = [[0f64; 16]; 2];
    for (w, start) in [0, shift].iter().enumerate() {
        for k in *start..start + len {
            counts[w][cell(xs[k], xs[k + 1])] += 1.0;
        }
    }
    let mut stat = 0.0;
    let mut used = 0;
    for c in 0..16 {
        let col = counts[0][c] + counts[1][c];
        if col == 0.0 {
            continue;
        }
        used += 1;
        for row in &counts {
            let e = col / 2.0;
            stat += (row[c] - e).powi(2) / e;
        }
    }
    if used < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((used - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn stationarity_of_pair_distributions() {
    let specs = [
        ProcessSpec::iid(IidLaw::Rademacher),
        ProcessSpec::iid(IidLaw::ComplexGaussian { variance: 1.0 }),
        ma11(),
        golden(),
        ProcessSpec::gaussian_spectral(MeasureSpec::singular_half_power(1.0), 1 << 17, Field::Real),
    ];
    for spec in specs {
        let xs = take(&mut make_stream(&spec, 4).unwrap(), 101_001);
        let p = stationarity_p_value(&xs, 1000, 100_000);
        assert!(p > 1e-3, "{spec:?}: p = {p}");
    }
}

//! Python bindings for the twisted-walk toolkit.

use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use twistwalk::cli::resolve_process;
use twistwalk::diagnostics::{analyze, Thresholds};
use twistwalk::group::{Angle, GroupElement};
use twistwalk::processes::{self, Field};
use twistwalk::spectral::{self, CovarianceSequence, DEFAULT_GRID};
use twistwalk::walk::{self, Beta, RunOptions, WalkConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn field_of(name: &str) -> PyResult<Field> {
    match name {
        "real" => Ok(Field::Real),
        "complex" => Ok(Field::Complex),
        other => Err(value_err(format!(
            "field must be 'real' or 'complex', got {other:?}"
        ))),
    }
}

/// Element `(z, θ)` of the plane-rotation group.
#[pyclass(name = "GroupElement", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGroupElement(GroupElement);

#[pymethods]
impl PyGroupElement {
    #[new]
    #[pyo3(signature = (z, theta=0.0))]
    fn new(z: Complex64, theta: f64) -> PyResult<Self> {
        GroupElement::new(z, Angle::new(theta))
            .map(Self)
            .map_err(value_err)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(GroupElement::identity())
    }

    #[getter]
    fn z(&self) -> Complex64 {
        self.0.z
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.0.theta.radians()
    }

    fn inv(&self) -> Self {
        Self(self.0.inv())
    }

    fn scale(&self, eta: f64) -> PyResult<Self> {
        self.0.scale(eta).map(Self).map_err(value_err)
    }

    fn proj_c(&self) -> Complex64 {
        self.0.proj_c()
    }

    fn __mul__(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    fn __repr__(&self) -> String {
        format!(
            "GroupElement(z={}, theta={})",
            self.0.z,
            self.0.theta.radians()
        )
    }
}

/// Fejér kernel `K_n(x)`.
#[pyfunction]
fn fejer(n: usize, x: f64) -> f64 {
    spectral::fejer(n, x)
}

/// `v(n, β)` from covariances `r_0, r_1, …`.
#[pyfunction]
fn predicted_variance(covariances: Vec<Complex64>, beta: f64, n: usize) -> PyResult<f64> {
    let r = CovarianceSequence::new(covariances).map_err(value_err)?;
    spectral::predicted_variance(&r, Angle::new(beta), n).map_err(value_err)
}

/// `v(n, β)` by integrating the Fejér kernel against a process's spectral measure.
#[pyfunction]
#[pyo3(signature = (process, n, beta, field="real"))]
fn spectral_convolve(process: &str, n: usize, beta: f64, field: &str) -> PyResult<f64> {
    if n == 0 {
        return Err(value_err("n must be positive"));
    }
    let spec = resolve_process(process, n, field_of(field)?).map_err(value_err)?;
    let m = spec.spectral_measure(DEFAULT_GRID).map_err(value_err)?;
    Ok(spectral::spectral_convolve(&m, n, Angle::new(beta)))
}

/// Parry (maximal-entropy) chain of a 0/1 adjacency matrix, as
/// `(transition, stationary)`.
#[pyfunction]
fn parry_chain(adjacency: Vec<Vec<u8>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let values = (0..adjacency.len())
        .map(|i| Complex64::new(i as f64, 0.0))
        .collect();
    let chain = processes::parry_chain(&adjacency, values).map_err(value_err)?;
    let pi = chain.stationary_vec().to_vec();
    Ok((chain.transition, pi))
}

/// Block increments of a walk twisted by `2πp/q`.
#[pyfunction]
fn blocked_walk(increments: Vec<Complex64>, p: i64, q: u64) -> PyResult<Vec<Complex64>> {
    Ok(walk::blocked_walk(increments.into_iter(), p, q)
        .map_err(value_err)?
        .collect())
}

/// Simulates an ensemble and returns the diagnostics report as JSON.
#[pyfunction]
#[pyo3(signature = (process, beta="1.0", n_max=4096, replicas=10_000, seed=0, nugget=0.0, workers=None, field="real"))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    process: &str,
    beta: &str,
    n_max: usize,
    replicas: usize,
    seed: u64,
    nugget: f64,
    workers: Option<usize>,
    field: &str,
) -> PyResult<String> {
    let beta: Beta = beta.parse().map_err(value_err)?;
    let spec = resolve_process(process, n_max, field_of(field)?).map_err(value_err)?;
    let cfg = WalkConfig::new(beta, n_max, replicas, seed).with_nugget(nugget);
    py.detach(|| {
        let ens = walk::simulate_with(
            &spec,
            &cfg,
            RunOptions {
                workers,
                deadline: None,
            },
        )
        .map_err(|e| e.to_string())?;
        let report = analyze(&ens, &Thresholds::default(), seed).map_err(|e| e.to_string())?;
        Ok::<_, String>(report.to_json())
    })
    .map_err(value_err)
}

#[pymodule]
fn twistwalk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGroupElement>()?;
    m.add_function(wrap_pyfunction!(fejer, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_variance, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_convolve, m)?)?;
    m.add_function(wrap_pyfunction!(parry_chain, m)?)?;
    m.add_function(wrap_pyfunction!(blocked_walk, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("PHASE_CONVENTION", spectral::PHASE_CONVENTION)?;
    Ok(())
}

//! Python bindings: load models, simulate data, evaluate the marginal log
//! posterior and its gradient, run the samplers, and compute convergence
//! diagnostics without leaving Python.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dsem_kalman::data::Dataset;
use dsem_kalman::diagnostics;
use dsem_kalman::model::{self, presets::PresetOptions, ModelSpec};
use dsem_kalman::posterior::{MarginalTarget, PosteriorOpts, Target};
use dsem_kalman::samplers::{run_experiment, InitStrategy, MassMatrix, SamplerConfig, SamplerKind};
use dsem_kalman::simgen::{simulate as simulate_rs, SimConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A loaded and validated model.
#[pyclass(name = "Model")]
struct PyModel {
    spec: ModelSpec,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn name(&self) -> String {
        self.spec.name.clone()
    }

    #[getter]
    fn theta_names(&self) -> Vec<String> {
        self.spec.theta_names()
    }

    #[getter]
    fn dims<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("u", self.spec.dims.u)?;
        d.set_item("v1", self.spec.dims.v1)?;
        d.set_item("v2", self.spec.dims.v2)?;
        d.set_item("v3", self.spec.dims.v3)?;
        d.set_item("lag", self.spec.dims.lag)?;
        Ok(d)
    }

    /// Documented data-generating parameter values (unconstrained scale).
    #[getter]
    fn truth(&self) -> BTreeMap<String, f64> {
        self.spec.presets.truth.clone()
    }

    /// Canonical JSON serialization.
    fn to_json(&self) -> String {
        model::save_model(&self.spec)
    }

    /// Packed coordinate names for a dataset of n participants and t
    /// timepoints.
    fn packed_names(&self, n: usize, t: usize) -> Vec<String> {
        dsem_kalman::posterior::Packing::new(
            &self.spec,
            n,
            t,
            dsem_kalman::posterior::Parameterization::NonCentered,
        )
        .names()
        .to_vec()
    }
}

/// Load a built-in preset (eg1..eg5) or a model file; `overrides` accepts
/// preset structure knobs such as "indicators=3" or "p=2".
#[pyfunction]
#[pyo3(signature = (name_or_path, overrides = ""))]
fn load_model(name_or_path: &str, overrides: &str) -> PyResult<PyModel> {
    let opts = PresetOptions::parse(overrides).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let spec = model::load_model_with_overrides(name_or_path, &opts).map_err(err)?;
    Ok(PyModel { spec })
}

/// Parse a model from JSON text.
#[pyfunction]
fn load_model_json(text: &str) -> PyResult<PyModel> {
    let spec = model::load_model_str(text).map_err(err)?;
    Ok(PyModel { spec })
}

fn dataset_from_py(model: &PyModel, y: Vec<Vec<Vec<Option<f64>>>>) -> PyResult<Dataset> {
    let n = y.len();
    if n == 0 {
        return Err(PyValueError::new_err("y must be non-empty"));
    }
    let t_len = y[0].len();
    let u = model.spec.dims.u;
    let mut values = vec![f64::NAN; n * t_len * u];
    let mut mask = vec![false; n * t_len * u];
    for (i, series) in y.iter().enumerate() {
        if series.len() != t_len {
            return Err(PyValueError::new_err("ragged participant series"));
        }
        for (t, row) in series.iter().enumerate() {
            if row.len() != u {
                return Err(PyValueError::new_err(format!(
                    "row ({i}, {t}) has {} entries, expected {u}",
                    row.len()
                )));
            }
            for (r, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    let pos = (i * t_len + t) * u + r;
                    values[pos] = *v;
                    mask[pos] = true;
                }
            }
        }
    }
    Dataset::new(n, t_len, u, 0, (1..=n as i64).collect(), values, mask, Vec::new()).map_err(err)
}

/// Simulate a dataset; returns a dict with observations (missing entries are
/// None) and the generating truth.
#[pyfunction]
#[pyo3(signature = (model, n, t, seed = 1, missing_rate = 0.0))]
fn simulate<'py>(
    py: Python<'py>,
    model: &PyModel,
    n: usize,
    t: usize,
    seed: u64,
    missing_rate: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sc = SimConfig { n, t_len: t, seed, missing_rate, ..SimConfig::for_spec(&model.spec) };
    let out = simulate_rs(&model.spec, &sc).map_err(err)?;
    let u = model.spec.dims.u;
    let y: Vec<Vec<Vec<Option<f64>>>> = (0..n)
        .map(|i| {
            (0..t)
                .map(|tt| {
                    (0..u)
                        .map(|r| {
                            if out.data.observed(i, tt, r) {
                                Some(out.data.value(i, tt, r))
                            } else {
                                None
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let d = PyDict::new(py);
    d.set_item("y", y)?;
    d.set_item("theta_truth", out.truth.theta.clone())?;
    d.set_item("eta2", out.truth.eta2.clone())?;
    d.set_item("acceptance_fraction", out.truth.acceptance_fraction)?;
    Ok(d)
}

/// Marginal log posterior at packed coordinates.
#[pyfunction]
fn log_posterior(model: &PyModel, y: Vec<Vec<Vec<Option<f64>>>>, x: Vec<f64>) -> PyResult<f64> {
    let data = dataset_from_py(model, y)?;
    dsem_kalman::posterior::log_posterior(&model.spec, &data, &x).map_err(err)
}

/// Marginal log posterior and its exact reverse-mode gradient.
#[pyfunction]
fn grad_log_posterior(
    model: &PyModel,
    y: Vec<Vec<Vec<Option<f64>>>>,
    x: Vec<f64>,
) -> PyResult<(f64, Vec<f64>)> {
    let data = dataset_from_py(model, y)?;
    let res = dsem_kalman::posterior::grad_log_posterior(&model.spec, &data, &x).map_err(err)?;
    Ok((res.logp, res.grad))
}

/// Run a sampler; returns draws (chains x iterations x dim), packed names,
/// and per-chain divergence counts.
#[pyfunction]
#[pyo3(signature = (model, y, sampler = "nuts-kalman", chains = 4, iterations = 2000,
                    warmup = 1000, target_accept = 0.95, max_treedepth = 12, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    model: &PyModel,
    y: Vec<Vec<Vec<Option<f64>>>>,
    sampler: &str,
    chains: usize,
    iterations: usize,
    warmup: usize,
    target_accept: f64,
    max_treedepth: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = dataset_from_py(model, y)?;
    let kind: SamplerKind = sampler.parse().map_err(err)?;
    let cfg = SamplerConfig {
        chains,
        iterations,
        warmup,
        target_accept,
        max_treedepth,
        mass_matrix: MassMatrix::DiagonalAdapted,
        seed,
        init: InitStrategy::RandomUniform,
    };
    let outcome =
        run_experiment(&model.spec, &data, kind, &cfg, PosteriorOpts::default()).map_err(err)?;
    let draws: Vec<Vec<Vec<f64>>> = outcome.chains.iter().map(|c| c.draws.clone()).collect();
    let d = PyDict::new(py);
    d.set_item("names", outcome.names.clone())?;
    d.set_item("draws", draws)?;
    d.set_item(
        "divergences",
        outcome.chains.iter().map(|c| c.divergence_count).collect::<Vec<_>>(),
    )?;
    d.set_item("elapsed_s", outcome.elapsed_s)?;
    Ok(d)
}

/// Rank-normalized split R-hat of chains (list of per-chain draw lists).
#[pyfunction]
fn split_rhat(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::split_rhat(&chains).map_err(err)
}

/// Bulk effective sample size.
#[pyfunction]
fn ess_bulk(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::ess_bulk(&chains).map_err(err)
}

/// Tail effective sample size (minimum over 5% and 95% indicator series).
#[pyfunction]
fn ess_tail(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::ess_tail(&chains).map_err(err)
}

/// Gradient check: max relative discrepancy between the reverse-mode gradient
/// and central finite differences at a point.
#[pyfunction]
fn check_grad(model: &PyModel, y: Vec<Vec<Vec<Option<f64>>>>, x: Vec<f64>) -> PyResult<f64> {
    let data = dataset_from_py(model, y)?;
    let target = MarginalTarget::new(&model.spec, &data, PosteriorOpts::default()).map_err(err)?;
    let mut grad = vec![0.0; x.len()];
    let lp = target.logp_grad(&x, &mut grad);
    if !lp.is_finite() {
        return Err(PyRuntimeError::new_err("log posterior not finite at x"));
    }
    let fd = dsem_kalman::posterior::fd_gradient(&target, &x);
    Ok(grad
        .iter()
        .zip(&fd)
        .map(|(g, f)| (g - f).abs() / (1.0 + f.abs()))
        .fold(0.0, f64::max))
}

#[pymodule]
fn dsem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(load_model_json, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(log_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(grad_log_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(split_rhat, m)?)?;
    m.add_function(wrap_pyfunction!(ess_bulk, m)?)?;
    m.add_function(wrap_pyfunction!(ess_tail, m)?)?;
    m.add_function(wrap_pyfunction!(check_grad, m)?)?;
    Ok(())
}

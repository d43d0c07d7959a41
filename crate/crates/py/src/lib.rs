//! Python bindings. Structured inputs and outputs travel as JSON strings
//! using the same schemas as the `lab` CLI.

use std::path::Path;

use difflab::bounds::{self, BoundInputs, Convention, DiscreteDensityPair};
use difflab::datagen::{gen_gaussian_mixture, DatasetSpec};
use difflab::difficulty;
use difflab::error::LabError;
use difflab::labcli::{self, CliError, Experiment, ExperimentConfig};
use difflab::maxmargin;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn lab_err(e: LabError) -> PyErr {
    match e {
        LabError::InvalidInput(_) | LabError::Domain(_) | LabError::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Usage(msg) => PyValueError::new_err(msg),
        CliError::Runtime(e) => lab_err(e),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Samples a Gaussian mixture from a JSON spec.
/// Returns `(features, labels, class_of)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn generate(spec_json: &str) -> PyResult<(Vec<Vec<f64>>, Vec<i64>, Vec<usize>)> {
    let spec: DatasetSpec = serde_json::from_str(spec_json).map_err(json_err)?;
    let ds = gen_gaussian_mixture(&spec).map_err(lab_err)?;
    let features = (0..ds.n()).map(|i| ds.x(i).to_vec()).collect();
    Ok((features, ds.labels.clone(), ds.class_of.clone()))
}

/// Runs one experiment (`gen`, `train`, `difficulty`, `bound`, `check` or
/// `report`) and returns its manifest as JSON.
#[pyfunction]
fn run_experiment(experiment: &str, config_json: &str, out_dir: &str) -> PyResult<String> {
    let exp: Experiment = serde_json::from_value(serde_json::Value::String(experiment.into())).map_err(json_err)?;
    let cfg = ExperimentConfig::from_json(config_json).map_err(cli_err)?;
    let manifest = labcli::run(exp, &cfg, Path::new(out_dir)).map_err(cli_err)?;
    serde_json::to_string(&manifest).map_err(json_err)
}

/// Runs the config's `checks` list and returns one verdict JSON per check.
#[pyfunction]
fn run_checks(config_json: &str) -> PyResult<Vec<String>> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(cli_err)?;
    cfg.validate(Experiment::Check).map_err(cli_err)?;
    let verdicts = labcli::run_checks(&cfg).map_err(lab_err)?;
    verdicts.iter().map(|v| serde_json::to_string(v).map_err(json_err)).collect()
}

/// `exp(−μ + σ²/2)`.
#[pyfunction]
fn closed_form_error(mu: f64, sigma2: f64) -> PyResult<f64> {
    difficulty::closed_form_error(mu, sigma2).map_err(lab_err)
}

/// Adjusted skewness and kurtosis Z-scores of a sample.
#[pyfunction]
fn gaussianity_z(samples: Vec<f64>) -> PyResult<(f64, f64)> {
    difficulty::gaussianity_z(&samples).map_err(lab_err)
}

/// Confidence term `ε(γ, n, δ)` of the bound.
#[pyfunction]
#[pyo3(signature = (gamma, delta, q, l, n))]
fn epsilon_term(gamma: f64, delta: f64, q: u32, l: f64, n: usize) -> PyResult<f64> {
    bounds::epsilon_term(&BoundInputs { gamma, delta, q, l, n }).map_err(lab_err)
}

/// χ² divergence between a target and a weighted source density on a
/// shared discrete support. `convention` is `"source_weighted"` or `"standard"`.
#[pyfunction]
#[pyo3(signature = (p_t, p_tilde_s, convention = "source_weighted"))]
fn chi2_divergence(p_t: Vec<f64>, p_tilde_s: Vec<f64>, convention: &str) -> PyResult<f64> {
    let conv: Convention = serde_json::from_value(serde_json::Value::String(convention.into())).map_err(json_err)?;
    let pair = DiscreteDensityPair::from_densities(p_t, p_tilde_s).map_err(lab_err)?;
    bounds::chi2_divergence(&pair, conv).map_err(lab_err)
}

/// Max-margin direction through the origin for `±1` labels.
/// Returns `(direction, gamma_star)`.
#[pyfunction]
fn solve_max_margin(features: Vec<Vec<f64>>, labels: Vec<i64>) -> PyResult<(Vec<f64>, f64)> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if features.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("ragged feature rows"));
    }
    let flat: Vec<f64> = features.into_iter().flatten().collect();
    let x = ndarray::Array2::from_shape_vec((n, d), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let class_of = labels.iter().map(|&y| usize::from(y > 0)).collect();
    let ds = difflab::datagen::Dataset::new(x, labels, vec![false; n], class_of, 2).map_err(lab_err)?;
    let sol = maxmargin::solve_max_margin(&ds).map_err(lab_err)?;
    Ok((sol.direction, sol.gamma_star))
}

#[pymodule]
fn difflab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", difflab::SCHEMA_VERSION)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_error, m)?)?;
    m.add_function(wrap_pyfunction!(gaussianity_z, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_term, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(solve_max_margin, m)?)?;
    Ok(())
}

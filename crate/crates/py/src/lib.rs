//! Python bindings for `mind-core`.
//!
//! Configurations are passed as dicts of overrides on top of the run defaults,
//! using the same keys as the TOML config. Reports come back as JSON strings.

use std::path::PathBuf;

use mind_core::commands::{cmd_gradcheck, cmd_routes, cmd_synth, cmd_train, gradcheck_config, GradcheckOptions};
use mind_core::config::{RunConfig, ENV_PREFIX};
use mind_core::mind::{load_checkpoint, save_checkpoint};
use mind_core::sadgate::{combine_topk as core_combine_topk, GateOutput};
use mind_core::tensorcore::Matrix;
use mind_core::{metrics, Error};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_from(base: RunConfig, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<PyBool>() {
                v.extract::<bool>()?.to_string()
            } else if let Ok(s) = v.extract::<String>() {
                format!("{s:?}")
            } else {
                v.str()?.to_string()
            };
            pairs.push((format!("{ENV_PREFIX}{}", key.to_ascii_uppercase()), value));
        }
    }
    base.layered(None, pairs).map_err(py_err)
}

fn matrix_from(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(&rows).map_err(py_err)
}

fn matrix_to(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Sparse routing result for one token.
#[pyclass(name = "GateOutput", frozen, get_all)]
struct PyGateOutput {
    p: Vec<f64>,
    pi: Vec<f64>,
    u: Vec<f64>,
    w_hat: Vec<f64>,
    selected: Vec<usize>,
    margin: f64,
}

impl From<GateOutput> for PyGateOutput {
    fn from(g: GateOutput) -> Self {
        Self {
            p: g.p,
            pi: g.pi,
            u: g.u,
            w_hat: g.w_hat,
            selected: g.selected,
            margin: g.margin,
        }
    }
}

/// A MIND decoder: optional AFIRE front end, SADGate router and expert bank.
#[pyclass(name = "Model")]
struct PyModel {
    inner: mind_core::mind::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&Bound<'_, PyDict>>, seed: u64) -> PyResult<Self> {
        let cfg = config_from(RunConfig::default(), config)?;
        let inner = mind_core::mind::Model::new(cfg.model_config(), seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, None, &path).map_err(py_err)
    }

    /// Model configuration as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(json_err)
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.inner.config.e
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.config.k
    }

    /// Predicted responses for one window of TR-aligned inputs.
    fn predict(&self, inputs: Vec<Vec<f64>>, subject: usize) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix_from(inputs, self.inner.config.d_in)?;
        Ok(matrix_to(&self.inner.predict(&x, subject).map_err(py_err)?))
    }

    /// Routing of every token in one window.
    fn route(&self, inputs: Vec<Vec<f64>>, subject: usize) -> PyResult<Vec<PyGateOutput>> {
        let x = matrix_from(inputs, self.inner.config.d_in)?;
        let fwd = self.inner.forward_window(&x, subject).map_err(py_err)?;
        Ok(fwd.gates.into_iter().map(PyGateOutput::from).collect())
    }

    /// Expert evaluations so far.
    fn expert_calls(&self) -> u64 {
        self.inner.mind.bank.calls()
    }

    /// Routing CSV for the first `first_n_tr` TRs of a dataset directory.
    #[pyo3(signature = (data_dir, subjects = None, first_n_tr = 100))]
    fn routes_csv(&self, data_dir: PathBuf, subjects: Option<Vec<usize>>, first_n_tr: usize) -> PyResult<String> {
        let data = mind_core::dataset::Dataset::load(&data_dir).map_err(py_err)?;
        cmd_routes(&self.inner, &data, subjects.as_deref(), first_n_tr).map_err(py_err)
    }
}

#[pyfunction]
fn combine_topk(p: Vec<f64>, pi: Vec<f64>, k: usize) -> PyResult<PyGateOutput> {
    Ok(core_combine_topk(&p, &pi, k).map_err(py_err)?.into())
}

#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&a, &b).map_err(py_err)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&a, &b).map_err(py_err)
}

#[pyfunction]
fn r_squared(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    metrics::r_squared(&pred, &target).map_err(py_err)
}

/// Effective run configuration as TOML.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn resolve_config(config: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    config_from(RunConfig::default(), config)?.to_toml_string().map_err(py_err)
}

/// Write a planted dataset; returns the synthesis summary as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn synth(out_dir: PathBuf, config: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg = config_from(RunConfig::default(), config)?;
    serde_json::to_string(&cmd_synth(&cfg, &out_dir).map_err(py_err)?).map_err(json_err)
}

/// Train and write artifacts to `out_dir`; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn train(py: Python<'_>, out_dir: PathBuf, config: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg = config_from(RunConfig::default(), config)?;
    let summary = py.detach(|| cmd_train(&cfg, &out_dir)).map_err(py_err)?;
    serde_json::to_string(&summary).map_err(json_err)
}

/// Finite-difference check on a small model; returns the outcome as JSON.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn gradcheck(config: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let cfg = config_from(gradcheck_config(), config)?;
    let out = cmd_gradcheck(&cfg, &GradcheckOptions::default()).map_err(py_err)?;
    serde_json::to_string(&out).map_err(json_err)
}

#[pymodule]
pub fn mind_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyGateOutput>()?;
    m.add_function(wrap_pyfunction!(combine_topk, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use semevo_core::harness::{self, RunConfig};
use semevo_core::{projector, prototypes, queue};

create_exception!(semevo, SemevoError, PyException);

fn err(e: semevo_core::Error) -> PyErr {
    SemevoError::new_err(format!("{:?}: {e}", e.category()))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(SemevoError::new_err("expected a non-empty list of equal-length rows"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| SemevoError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Linear map between feature spaces, `v ↦ Wᵀv (+ b)`.
#[pyclass(name = "Projector", module = "semevo", frozen, from_py_object)]
#[derive(Clone)]
struct PyProjector(Arc<projector::Projector>);

#[pymethods]
impl PyProjector {
    #[staticmethod]
    fn identity(dim: usize) -> Self {
        Self(Arc::new(projector::Projector::identity(dim)))
    }

    #[new]
    #[pyo3(signature = (weights, bias=None))]
    fn new(weights: Vec<Vec<f64>>, bias: Option<Vec<f64>>) -> PyResult<Self> {
        let p = projector::Projector::affine(matrix(weights)?, bias.map(DVector::from_vec)).map_err(err)?;
        Ok(Self(Arc::new(p)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        rows(self.0.weights())
    }

    #[getter]
    fn bias(&self) -> Option<Vec<f64>> {
        self.0.bias().map(|b| b.iter().copied().collect())
    }

    fn apply(&self, vector: Vec<f64>) -> PyResult<Vec<f64>> {
        if vector.len() != self.0.dim() {
            return Err(SemevoError::new_err(format!("expected {} components", self.0.dim())));
        }
        Ok(self.0.apply(&DVector::from_vec(vector)).iter().copied().collect())
    }

    fn __repr__(&self) -> String {
        format!("Projector(dim={})", self.0.dim())
    }
}

/// Paired FIFO queues of old-space and new-space features.
#[pyclass(name = "QueuePair", module = "semevo")]
struct PyQueuePair(queue::QueuePair);

#[pymethods]
impl PyQueuePair {
    #[new]
    fn new(capacity: usize, dim: usize) -> PyResult<Self> {
        Ok(Self(queue::QueuePair::new(capacity, dim).map_err(err)?))
    }

    /// Appends paired rows, evicting the oldest rows once the queue is full.
    fn push(&mut self, old: Vec<Vec<f64>>, new: Vec<Vec<f64>>) -> PyResult<()> {
        self.0.push_pair(&matrix(old)?, &matrix(new)?).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.0.capacity()
    }

    fn old_rows(&self) -> Vec<Vec<f64>> {
        rows(&self.0.old_matrix())
    }

    fn new_rows(&self) -> Vec<Vec<f64>> {
        rows(&self.0.new_matrix())
    }

    /// Least-squares projector and its mean squared residual.
    #[pyo3(signature = (ridge=0.0))]
    fn solve_analytic(&self, ridge: f64) -> PyResult<(PyProjector, f64)> {
        let (p, report) = projector::solve_analytic(&self.0, ridge).map_err(err)?;
        Ok((PyProjector(Arc::new(p)), report.residual))
    }

    /// `steps` plain gradient steps from `init` (identity when omitted).
    #[pyo3(signature = (steps, learning_rate=projector::DEFAULT_GD_LEARNING_RATE, init=None))]
    fn solve_gradient_descent(
        &self,
        steps: usize,
        learning_rate: f64,
        init: Option<PyProjector>,
    ) -> PyResult<(PyProjector, f64)> {
        let init = init.map_or_else(|| projector::Projector::identity(self.0.dim()), |p| (*p.0).clone());
        let (p, report) = projector::solve_gradient_descent(&self.0, &init, learning_rate, steps).map_err(err)?;
        Ok((PyProjector(Arc::new(p)), report.residual))
    }
}

/// Per-class prototypes with nearest-class-mean prediction.
#[pyclass(name = "PrototypeTable", module = "semevo", skip_from_py_object)]
#[derive(Clone)]
struct PyPrototypeTable(prototypes::PrototypeTable);

#[pymethods]
impl PyPrototypeTable {
    /// Class means of `features` grouped by `labels`.
    #[staticmethod]
    #[pyo3(signature = (features, labels, task=1))]
    fn from_features(features: Vec<Vec<f64>>, labels: Vec<u32>, task: u32) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(SemevoError::new_err("one label per feature row is required"));
        }
        let records = features
            .into_iter()
            .zip(labels)
            .map(|(f, c)| prototypes::FeatureRecord::new(DVector::from_vec(f), c, task))
            .collect::<semevo_core::Result<Vec<_>>>()
            .map_err(err)?;
        Ok(Self(prototypes::compute_prototypes(&records).map_err(err)?))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn classes(&self) -> Vec<u32> {
        self.0.classes().collect()
    }

    fn prototype(&self, class_id: u32) -> Option<Vec<f64>> {
        self.0.prototype(class_id).map(|p| p.iter().copied().collect())
    }

    fn predict(&self, feature: Vec<f64>) -> PyResult<u32> {
        prototypes::ncm_predict(&DVector::from_vec(feature), &self.0).map_err(err)
    }

    /// Copy with the prototypes of `classes` (all classes when omitted) mapped through
    /// `projector`.
    #[pyo3(signature = (projector, classes=None))]
    fn evolved(&self, projector: &PyProjector, classes: Option<Vec<u32>>) -> PyResult<Self> {
        let set = match classes {
            Some(c) => c.into_iter().collect(),
            None => self.0.classes().collect(),
        };
        Ok(Self(projector::evolve_prototypes(&self.0, &projector.0, &set).map_err(err)?))
    }
}

/// Run configuration; built from TOML text or a file.
#[pyclass(name = "RunConfig", module = "semevo", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    /// Defaults, optionally overridden by TOML text.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        match toml {
            Some(text) => Ok(Self(RunConfig::from_toml_str(text).map_err(err)?)),
            None => Ok(Self(RunConfig::new())),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(RunConfig::load(&path).map_err(err)?))
    }

    /// Copy with one key replaced; `value` is a TOML literal such as `"3"` or `'"none"'`.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        Ok(Self(self.0.with_override(key, value).map_err(err)?))
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml_string().map_err(err)
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.0.seeds.clone()
    }
}

/// Metrics of one run as a dict.
#[pyfunction]
fn run<'py>(py: Python<'py>, config: &PyRunConfig, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let outcome = py.detach(|| harness::run_once(&config.0, seed)).map_err(err)?;
    json_to_py(py, &outcome.metrics)
}

/// Metrics of every configured seed, as a list of dicts.
#[pyfunction]
fn run_seeds<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let records = py.detach(|| harness::run_seeds(&config.0)).map_err(err)?;
    json_to_py(py, &records)
}

/// Runs with a replay log and re-predicts every logged sample; returns the audit as a dict.
#[pyfunction]
fn audit<'py>(py: Python<'py>, config: &PyRunConfig, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig {
        replay_audit: true,
        ..config.0.clone()
    };
    let report = py
        .detach(|| {
            let scenario = harness::build_scenario(&cfg, seed)?;
            let outcome = harness::run_scenario(&scenario, &cfg, seed)?;
            harness::replay_audit(&scenario, &outcome)
        })
        .map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("samples", report.samples)?;
    dict.set_item("mismatches", report.mismatches)?;
    dict.set_item("per_task_accuracy", report.per_task_accuracy)?;
    dict.set_item("reproduced", report.reproduced)?;
    Ok(dict.into_any())
}

/// Runs the configured seeds and writes their result files into `out_dir`; returns the
/// path of `results.csv`.
#[pyfunction]
fn run_and_write(py: Python<'_>, config: &PyRunConfig, out_dir: PathBuf) -> PyResult<PathBuf> {
    let files = py
        .detach(|| harness::run_seeds(&config.0).and_then(|r| harness::emit_results(&out_dir, &r)))
        .map_err(err)?;
    Ok(files.results)
}

#[pymodule]
fn semevo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SemevoError", m.py().get_type::<SemevoError>())?;
    m.add_class::<PyProjector>()?;
    m.add_class::<PyQueuePair>()?;
    m.add_class::<PyPrototypeTable>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_seeds, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(run_and_write, m)?)?;
    Ok(())
}

//! Python bindings: ICD parsing, metrics, run configs, checkpoints and the CLI.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! Python dicts and lists.

use std::path::PathBuf;

use ecgscreen::cli::{self, RunConfig};
use ecgscreen::icd::IcdCode;
use ecgscreen::metrics::{self, read_metrics_csv};
use ecgscreen::model::{predict, Checkpoint, Examples};
use ecgscreen::screen::{select_labels, SelectionRule};
use ecgscreen::signal::{normalize, read_container};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Canonical form of an ICD-10 code, e.g. " i480 " -> "I480".
#[pyfunction]
fn parse_code(raw: &str) -> PyResult<String> {
    Ok(IcdCode::parse(raw).map_err(value_err)?.to_string())
}

/// Three-character category of a code.
#[pyfunction]
fn category_of(raw: &str) -> PyResult<String> {
    Ok(IcdCode::parse(raw).map_err(value_err)?.category().to_string())
}

#[pyfunction]
fn chapter_of(raw: &str) -> PyResult<String> {
    Ok(IcdCode::parse(raw).map_err(value_err)?.chapter())
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(value_err)
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auprc(&scores, &labels).map_err(value_err)
}

/// Rows of a metrics.csv written by `eval`.
#[pyfunction]
fn read_metrics<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let f = std::fs::File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let rows = read_metrics_csv(f).map_err(value_err)?;
    to_py(py, &rows)
}

/// Labels of a metrics.csv that pass the selection rule (default rule when omitted).
#[pyfunction]
#[pyo3(signature = (path, rule_json = None))]
fn select<'py>(py: Python<'py>, path: PathBuf, rule_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let rule: SelectionRule = match rule_json {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => SelectionRule::default(),
    };
    rule.validate().map_err(value_err)?;
    let f = std::fs::File::open(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let rows = read_metrics_csv(f).map_err(value_err)?;
    to_py(py, &select_labels(&rows, &rule))
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("ecgscreen".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pyclass(name = "RunConfig", module = "pyecgscreen", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Bundled preset: "desk-scale" or "paper-scale".
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::preset(name).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_json(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(PyRunConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(value_err)
    }

    fn with_seed(&self, seed: u64) -> Self {
        PyRunConfig {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    /// sha256 of the canonical JSON; tags every artifact of a run.
    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.preset.clone()
    }

    #[getter]
    fn min_support(&self) -> usize {
        self.inner.min_support
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(preset={:?}, digest={})", self.inner.preset, &self.inner.digest()[..12])
    }
}

#[pyclass(name = "Checkpoint", module = "pyecgscreen")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py
            .detach(|| Checkpoint::load(&path))
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Ok(PyCheckpoint { inner })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.meta.labels.clone()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.meta.epoch
    }

    #[getter]
    fn config_digest(&self) -> String {
        self.inner.meta.config_digest.clone()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.network.n_parameters()
    }

    /// Per-epoch `{epoch, train_loss, val_loss}` records.
    fn loss_history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.meta.loss_history)
    }

    /// Label probabilities for every ECG of an ECGB container, keyed by ECG id.
    #[pyo3(signature = (container, batch_size = 64))]
    fn predict_container(&self, py: Python<'_>, container: PathBuf, batch_size: usize) -> PyResult<Vec<(u64, Vec<f32>)>> {
        py.detach(|| {
            let traces = read_container(&container).map_err(|e| PyIOError::new_err(format!("{}: {e}", container.display())))?;
            let cfg = self.inner.network.config();
            let zeros = vec![0u8; cfg.n_labels];
            let mut ex = Examples::new(cfg.input_leads, cfg.input_len, cfg.n_labels);
            for t in &traces {
                ex.push(&normalize(t, &self.inner.stats), &zeros).map_err(value_err)?;
            }
            let probs = predict(&self.inner.network, &ex, batch_size.max(1)).map_err(value_err)?;
            Ok(traces
                .iter()
                .zip(probs.chunks(cfg.n_labels))
                .map(|(t, p)| (t.meta.ecg_id.0, p.to_vec()))
                .collect())
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(labels={}, epoch={}, parameters={})",
            self.inner.meta.labels.len(),
            self.inner.meta.epoch,
            self.inner.network.n_parameters()
        )
    }
}

#[pymodule]
fn pyecgscreen(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_code, m)?)?;
    m.add_function(wrap_pyfunction!(category_of, m)?)?;
    m.add_function(wrap_pyfunction!(chapter_of, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(read_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings: read-only queries over a workspace and the pure parsers.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use expharness::ledger::{self, Filter};
use expharness::report::parse_report;
use expharness::{Error, Workspace};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// `(id, description, [(metric, value), ...])` for a commit subject.
#[pyfunction]
fn parse_commit(subject: &str) -> PyResult<(String, String, Vec<(String, f64)>)> {
    let m = ledger::parse_commit(subject).map_err(|e| PyValueError::new_err(format!("{}: {e}", e.code)))?;
    let metrics = m.metrics().iter().map(|x| (x.name.clone(), x.value)).collect();
    Ok((m.id().to_string(), m.description().to_string(), metrics))
}

#[pyfunction]
fn expand_nodelist(expr: &str) -> PyResult<Vec<String>> {
    expharness::scheduler::expand_nodelist(expr).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Problems in report text; empty when valid.
#[pyfunction]
fn validate_report(text: &str) -> Vec<String> {
    match parse_report(text) {
        Err(errs) => errs.0.iter().map(|e| e.to_string()).collect(),
        Ok(doc) => doc
            .ids()
            .into_iter()
            .filter_map(|id| doc.section(id))
            .flat_map(|s| s.validate())
            .map(|e| e.to_string())
            .collect(),
    }
}

#[pyfunction]
#[pyo3(signature = (path, n=10))]
fn tail(path: PathBuf, n: usize) -> PyResult<String> {
    expharness::supervisor::tail(&path, n).map_err(to_py)
}

/// Session state of the workspace at `root`, as JSON.
#[pyfunction]
fn bootstrap(root: PathBuf) -> PyResult<String> {
    let ws = Workspace::open(&root).map_err(to_py)?;
    let state = expharness::workspace::bootstrap_session(&ws).map_err(to_py)?;
    serde_json::to_string(&state).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Ledger records as JSON, optionally restricted to a branch or tag.
#[pyfunction]
#[pyo3(signature = (root, branch=None, tag=None))]
fn experiments(root: PathBuf, branch: Option<String>, tag: Option<String>) -> PyResult<String> {
    let ws = Workspace::open(&root).map_err(to_py)?;
    let filter = Filter {
        branch,
        tag,
        ..Filter::default()
    };
    let records = ledger::query(&ws, &filter).map_err(to_py)?;
    serde_json::to_string(&records).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn expharness_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_commit, m)?)?;
    m.add_function(wrap_pyfunction!(expand_nodelist, m)?)?;
    m.add_function(wrap_pyfunction!(validate_report, m)?)?;
    m.add_function(wrap_pyfunction!(tail, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(experiments, m)?)?;
    Ok(())
}

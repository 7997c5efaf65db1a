//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists built from their JSON form.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use bisimlab::certify;
use bisimlab::envs::{self, RunConfig};
use bisimlab::erank::{self, LinearSetting};
use bisimlab::mdp::{self as core_mdp, GridSpec, Policy, RewardKind, TabularMdp};
use bisimlab::metric::{self, MetricMatrix};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => py.import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(value_err)
}

fn reward_kind(name: &str) -> PyResult<RewardKind> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| value_err(format!("unknown reward kind {name:?}; use dense_distance, sparse_goal or zero")))
}

/// Finite MDP with transitions `transition[s][a][s']` and rewards `reward[s][a]`.
#[pyclass(name = "Mdp", module = "bisimlab", from_py_object)]
#[derive(Clone)]
struct PyMdp {
    inner: TabularMdp,
}

#[pymethods]
impl PyMdp {
    #[new]
    #[pyo3(signature = (transition, reward, gamma, initial_dist=None))]
    fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_dist: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let n = transition.len();
        let init = initial_dist.unwrap_or_else(|| vec![1.0 / n.max(1) as f64; n]);
        Ok(PyMdp {
            inner: TabularMdp::new(transition, reward, gamma, init).map_err(value_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, gamma, seed, reward_range=(0.0, 1.0)))]
    fn random(n_states: usize, n_actions: usize, gamma: f64, seed: u64, reward_range: (f64, f64)) -> PyResult<Self> {
        Ok(PyMdp {
            inner: core_mdp::make_random_mdp(n_states, n_actions, reward_range, gamma, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (width, height, reward="dense_distance", goal=None, slip_prob=0.1, gamma=0.99))]
    fn gridworld(
        width: usize,
        height: usize,
        reward: &str,
        goal: Option<(usize, usize)>,
        slip_prob: f64,
        gamma: f64,
    ) -> PyResult<Self> {
        let spec = GridSpec {
            width,
            height,
            reward: reward_kind(reward)?,
            goal: goal.unwrap_or((width.saturating_sub(1), height.saturating_sub(1))),
            slip_prob,
            gamma,
        };
        Ok(PyMdp {
            inner: core_mdp::make_gridworld(&spec).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyMdp {
            inner: TabularMdp::from_json(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    /// Least fixed point of the on-policy operator; `policy[s][a]` defaults
    /// to uniform. Returns the report as a dict.
    #[pyo3(signature = (policy=None, tol=1e-10, max_iter=10_000))]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        policy: Option<Vec<Vec<f64>>>,
        tol: f64,
        max_iter: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let policy = match policy {
            Some(p) => Policy::new(p).map_err(value_err)?,
            None => Policy::uniform(self.inner.n_states(), self.inner.n_actions()),
        };
        let mdp = &self.inner;
        let report = py
            .detach(|| metric::solve_fixed_point(mdp, &policy, tol, max_iter))
            .map_err(value_err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(n_states={}, n_actions={}, gamma={})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.gamma()
        )
    }
}

/// Exact Wasserstein-1 distance between `mu` and `nu` under a ground metric.
#[pyfunction]
fn wasserstein1(mu: Vec<f64>, nu: Vec<f64>, ground: Vec<Vec<f64>>) -> PyResult<f64> {
    let ground = MetricMatrix::from_rows(&ground).map_err(value_err)?;
    metric::wasserstein1(&mu, &nu, &ground).map_err(value_err)
}

#[pyfunction]
fn cosine_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    metric::cosine_distance(&u, &v).map_err(value_err)
}

/// Effective rank of a symmetric positive semidefinite matrix.
#[pyfunction]
fn effective_rank(matrix: Vec<Vec<f64>>) -> PyResult<f64> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(value_err("matrix must be square"));
    }
    let m = DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
    Ok(erank::erank(&m).map_err(value_err)?.erank)
}

/// Linear two-view experiment with `d_i = 8·2^{-i}`; one dict per step.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (n=8, k=4, sigma2=1.0, steps=100, seed=0, lr=1e-3, batch=256))]
fn linear_experiment<'py>(
    py: Python<'py>,
    n: usize,
    k: usize,
    sigma2: f64,
    steps: usize,
    seed: u64,
    lr: f64,
    batch: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let setting = LinearSetting {
        n,
        k,
        d: (0..n as i32).map(|i| 8.0 * 0.5f64.powi(i)).collect(),
        sigma2,
        lr,
        seed,
    };
    let run = py
        .detach(|| erank::run_linear_experiment(&setting, steps, batch))
        .map_err(value_err)?;
    to_py(py, &run)
}

/// Training configuration sized for minutes of CPU time, as a dict.
#[pyfunction]
#[pyo3(signature = (width=5, height=5, reward="dense_distance"))]
fn small_config<'py>(py: Python<'py>, width: usize, height: usize, reward: &str) -> PyResult<Bound<'py, PyAny>> {
    let c = RunConfig::small(width, height, reward_kind(reward)?);
    c.validate().map_err(value_err)?;
    to_py(py, &c)
}

/// Trains from a config dict or JSON string; writes the run directory when
/// `out` is given. Returns the per-step metrics rows.
#[pyfunction]
#[pyo3(signature = (config, out=None))]
fn train<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let config: RunConfig = from_py(py, config)?;
    config.validate().map_err(value_err)?;
    let outcome = py
        .detach(|| envs::train(&config, out.as_deref()))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &outcome.metrics)
}

/// Every metric and effective-rank certifier; one dict per check.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn certify_all<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let checks = py.detach(|| certify::certify_all(seed)).map_err(value_err)?;
    to_py(py, &checks)
}

#[pymodule]
fn bisimlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_function(wrap_pyfunction!(wasserstein1, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(linear_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(small_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(certify_all, m)?)?;
    Ok(())
}

//! Python bindings. Arrays cross the boundary as plain lists; structured
//! results come back as dicts mirroring their JSON serialization.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use latent_dml_core::dml::{self, Dataset, ElasticNetGrid, ResidualSet};
use latent_dml_core::harness::{self, HarnessConfig, Method};
use latent_dml_core::latent::{self, EmConfig, ModelKind};
use latent_dml_core::numerics::{self, RngStream};
use latent_dml_core::synthetic::{self, ScenarioConfig, ScenarioKind};
use latent_dml_core::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidParameter(_)
        | Error::InvalidData(_)
        | Error::Shape { .. }
        | Error::NotFound { .. }
        | Error::DegenerateTreatment
        | Error::DegenerateData(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn dataset(y: Vec<f64>, d: Vec<f64>, x: Vec<Vec<f64>>) -> PyResult<Dataset> {
    let n = y.len();
    let p = x.first().map_or(0, Vec::len);
    if x.len() != n || x.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("x must be a list of n rows of equal length"));
    }
    let flat: Vec<f64> = x.into_iter().flatten().collect();
    let x = Array2::from_shape_vec((n, p), flat).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Dataset::new(x, Array1::from(d), Array1::from(y)).map_err(to_py_err)
}

/// Synthetic scenario configuration.
#[pyclass(name = "Scenario", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (kind, n=300, d=100, theta=1.0, sparsity=0.1, exp_mean=5.0, a=2.0, b=2.0, q=None, sigma_u=1.0, sigma_v=0.5, laplace_scale=std::f64::consts::FRAC_1_SQRT_2))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: &str,
        n: usize,
        d: usize,
        theta: f64,
        sparsity: f64,
        exp_mean: f64,
        a: f64,
        b: f64,
        q: Option<f64>,
        sigma_u: f64,
        sigma_v: f64,
        laplace_scale: f64,
    ) -> PyResult<Self> {
        let kind: ScenarioKind = kind.parse().map_err(to_py_err)?;
        let inner = ScenarioConfig {
            n,
            d,
            theta_true: theta,
            sparsity,
            exp_mean,
            a,
            b,
            q,
            sigma_u,
            sigma_v,
            laplace_scale,
            ..ScenarioConfig::new(kind)
        };
        inner.validate().map_err(to_py_err)?;
        Ok(PyScenario { inner })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyScenario {
            inner: synthetic::preset(name).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn theta_true(&self) -> f64 {
        self.inner.theta_true
    }

    /// Draws one instance; returns a dict with `y`, `d`, `x` and `truth`.
    #[pyo3(signature = (seed=0))]
    fn generate<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let cfg = ScenarioConfig {
            seed,
            ..self.inner.clone()
        };
        let inst = synthetic::generate(&cfg).map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("y", inst.data.y.to_vec())?;
        out.set_item("d", inst.data.d.to_vec())?;
        let rows: Vec<Vec<f64>> = inst.data.x.rows().into_iter().map(|r| r.to_vec()).collect();
        out.set_item("x", rows)?;
        out.set_item("truth", to_dict(py, &inst.truth)?)?;
        Ok(out.into_any())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?})", self.inner)
    }
}

/// Cross-fitted residuals `(R, V)`.
#[pyclass(name = "Residuals", from_py_object)]
#[derive(Clone)]
struct PyResiduals {
    inner: ResidualSet,
}

#[pymethods]
impl PyResiduals {
    #[new]
    fn new(r_hat: Vec<f64>, v_hat: Vec<f64>) -> PyResult<Self> {
        Ok(PyResiduals {
            inner: ResidualSet::new(r_hat, v_hat).map_err(to_py_err)?,
        })
    }

    /// Cross-fits ElasticNet nuisances with grid-searched hyperparameters.
    #[staticmethod]
    #[pyo3(signature = (y, d, x, folds=5, seed=0))]
    fn cross_fit(y: Vec<f64>, d: Vec<f64>, x: Vec<Vec<f64>>, folds: usize, seed: u64) -> PyResult<Self> {
        let data = dataset(y, d, x)?;
        let stream = RngStream::new(seed).substream(0);
        let inner = dml::residualize(&data, folds, &ElasticNetGrid::default(), &stream).map_err(to_py_err)?;
        Ok(PyResiduals { inner })
    }

    #[getter]
    fn r_hat(&self) -> Vec<f64> {
        self.inner.r_hat.clone()
    }

    #[getter]
    fn v_hat(&self) -> Vec<f64> {
        self.inner.v_hat.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Ordinary DML estimate.
    fn pooled_theta(&self) -> PyResult<f64> {
        dml::pooled_theta(&self.inner).map_err(to_py_err)
    }

    /// Fits one model: `ordinary`, `outcome_latent` or `confounder_latent`.
    #[pyo3(signature = (model, seed=0))]
    fn fit<'py>(&self, py: Python<'py>, model: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let kind: ModelKind = model.parse().map_err(to_py_err)?;
        let report = latent::fit_model(&self.inner, kind, &EmConfig::default(), &RngStream::new(seed))
            .map_err(to_py_err)?;
        to_dict(py, &report)
    }

    /// BIC selection; defaults to both latent models.
    #[pyo3(signature = (candidates=None, seed=0))]
    fn select<'py>(
        &self,
        py: Python<'py>,
        candidates: Option<Vec<String>>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let kinds: Vec<ModelKind> = match candidates {
            Some(c) => c
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()
                .map_err(to_py_err)?,
            None => latent::DEFAULT_CANDIDATES.to_vec(),
        };
        let sel = latent::select_and_estimate(&self.inner, &kinds, &EmConfig::default(), &RngStream::new(seed))
            .map_err(to_py_err)?;
        to_dict(py, &sel)
    }
}

/// End-to-end estimate: cross-fit, then `model` in {auto, dml, outcome, confounder}.
#[pyfunction]
#[pyo3(signature = (y, d, x, model="auto", folds=5, seed=0))]
fn estimate<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    d: Vec<f64>,
    x: Vec<Vec<f64>>,
    model: &str,
    folds: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let data = dataset(y, d, x)?;
    let stream = RngStream::new(seed);
    let res = dml::residualize(&data, folds, &ElasticNetGrid::default(), &stream.substream(0)).map_err(to_py_err)?;
    let em = EmConfig::default();
    let model_stream = stream.substream(2);
    let sel = match model {
        "auto" => latent::select_and_estimate(&res, &latent::DEFAULT_CANDIDATES, &em, &model_stream),
        "dml" | "outcome" | "confounder" => {
            let kind = match model {
                "dml" => ModelKind::Ordinary,
                "outcome" => ModelKind::OutcomeLatent,
                _ => ModelKind::ConfounderLatent,
            };
            latent::fit_model(&res, kind, &em, &model_stream)
                .and_then(|f| latent::select_from(BTreeMap::from([(kind, f)]), BTreeMap::new()))
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown model '{other}'; valid values: auto, dml, outcome, confounder"
            )))
        }
    }
    .map_err(to_py_err)?;
    to_dict(py, &sel)
}

/// Monte Carlo sweep; returns `{"stats": [...], "runs": [...]}`.
#[pyfunction]
#[pyo3(signature = (scenario, methods="dml,outcome_latent,confounder_latent,bic_select", runs=10, seed=0, workers=1))]
fn benchmark<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    methods: &str,
    runs: usize,
    seed: u64,
    workers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let methods = Method::parse_list(methods).map_err(to_py_err)?;
    let hc = HarnessConfig {
        workers,
        ..HarnessConfig::default()
    };
    let cfg = scenario.inner.clone();
    let results = py
        .detach(|| harness::run_monte_carlo(&cfg, &methods, runs, seed, &hc))
        .map_err(to_py_err)?;
    let stats = harness::aggregate(&results, cfg.theta_true);
    to_dict(py, &harness::Report { stats, runs: results })
}

/// `-2 loglik + k ln n`
#[pyfunction]
fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    latent::bic(loglik, k, n)
}

/// `(E[X], E[X^2])` for `N(m, sigma^2)` truncated to `[0, inf)`.
#[pyfunction]
fn truncated_normal_moments(m: f64, sigma: f64) -> PyResult<(f64, f64)> {
    let t = numerics::truncated_normal_moments(m, sigma).map_err(to_py_err)?;
    Ok((t.mean, t.second_moment))
}

/// Log-density of the exponentially modified Gaussian.
#[pyfunction]
fn emg_log_density(x: f64, mu: f64, sigma: f64, rate: f64) -> PyResult<f64> {
    numerics::emg_log_density(x, mu, sigma, rate).map_err(to_py_err)
}

#[pymodule]
fn latent_dml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyResiduals>()?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(bic, m)?)?;
    m.add_function(wrap_pyfunction!(truncated_normal_moments, m)?)?;
    m.add_function(wrap_pyfunction!(emg_log_density, m)?)?;
    m.add("PRESETS", synthetic::PRESETS.to_vec())?;
    Ok(())
}

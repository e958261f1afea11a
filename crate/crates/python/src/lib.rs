//! Python bindings: models, experiment configs, campaigns and the loss.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qforecast::data::{gen_lorenz, gen_mackey_glass, LorenzParams, MackeyGlassParams, RawSeries};
use qforecast::engine::rng::{streams, SeededRng};
use qforecast::engine::Tensor;
use qforecast::eval::{
    aggregate_csv, horizon_table_csv, run_experiment as run_campaign, run_single, AggregateReport,
    DatasetKind, EvalError, ExperimentConfig, Metric,
};
use qforecast::loss::QuantileSet;
use qforecast::models::{build_model, Family, Model, ModelSpec};
use qforecast::suite;

fn eval_err(e: EvalError) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A forecasting network or linear baseline.
#[pyclass(name = "Model", module = "pyqforecast")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model of a family.
    #[staticmethod]
    #[pyo3(signature = (family, features, window, horizons, hidden=None, quantiles=None, seed=0))]
    fn build(
        family: &str,
        features: usize,
        window: usize,
        horizons: usize,
        hidden: Option<(usize, usize)>,
        quantiles: Option<Vec<f64>>,
        seed: u64,
    ) -> PyResult<Self> {
        let family: Family = family.parse().map_err(value_err)?;
        let (h1, h2) = hidden.unwrap_or_else(|| family.default_hidden());
        let quantiles = match quantiles {
            Some(q) => QuantileSet::new(q).map_err(value_err)?,
            None => QuantileSet::default(),
        };
        let spec = ModelSpec::new(family, features, window, horizons)
            .with_hidden(h1, h2)
            .with_quantiles(quantiles);
        let inner = build_model(&spec, &mut SeededRng::new(seed).split(streams::INIT))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Predictions `[n][m][K]` for windows `[n][d][f]`.
    fn predict(&self, windows: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let n = windows.len();
        let d = windows.first().map_or(0, Vec::len);
        let f = windows.first().and_then(|w| w.first()).map_or(0, Vec::len);
        let flat: Vec<f64> = windows.into_iter().flatten().flatten().collect();
        if flat.len() != n * d * f {
            return Err(value_err("windows must be a regular [n][d][f] nested list"));
        }
        let x = Tensor::from_vec(&[n, d, f], flat).map_err(value_err)?;
        let y = self.inner.predict_batched(&x, 256).map_err(value_err)?;
        let spec = self.inner.spec();
        let (m, k) = (spec.horizons, spec.quantiles.len());
        Ok(y.data()
            .chunks(m * k)
            .map(|row| row.chunks(k).map(<[f64]>::to_vec).collect())
            .collect())
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.spec().family.as_str()
    }

    #[getter]
    fn quantiles(&self) -> Vec<f64> {
        self.inner.spec().quantiles.levels().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.spec().param_count()
    }

    /// Bit-exact JSON checkpoint.
    fn to_checkpoint(&self) -> String {
        self.inner.to_checkpoint_string()
    }

    #[staticmethod]
    fn from_checkpoint(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Model::from_checkpoint_str(text).map_err(value_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Model::load(path.as_ref()).map_err(value_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!(
            "Model(family='{}', features={}, window={}, horizons={}, quantiles={:?})",
            s.family,
            s.features,
            s.window,
            s.horizons,
            s.quantiles.levels()
        )
    }
}

/// Experiment configuration; starts from the preset of a dataset.
#[pyclass(name = "ExperimentConfig", module = "pyqforecast")]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    #[pyo3(signature = (dataset="mackey-glass"))]
    fn new(dataset: &str) -> PyResult<Self> {
        let kind: DatasetKind = dataset.parse().map_err(eval_err)?;
        Ok(Self {
            inner: ExperimentConfig::preset(kind),
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_toml_str(text).map_err(eval_err)?,
        })
    }

    /// Replaces fields by keyword; nested tables are dicts, e.g.
    /// `train={"epochs": 5}`. The result must validate.
    #[pyo3(signature = (**fields))]
    fn update(&mut self, py: Python<'_>, fields: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
        let Some(fields) = fields else {
            return Ok(());
        };
        let text: String = py
            .import("json")?
            .call_method1("dumps", (fields,))?
            .extract()?;
        let patch: serde_json::Value = serde_json::from_str(&text).map_err(value_err)?;
        let next = self.inner.overlay(patch).map_err(eval_err)?;
        next.validate().map_err(eval_err)?;
        self.inner = next;
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(eval_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(name='{}', dataset='{}', family='{}', quantile={}, runs={})",
            self.inner.name,
            self.inner.dataset.kind.as_str(),
            self.inner.family,
            self.inner.quantile,
            self.inner.runs
        )
    }
}

/// Mean and 95% half-width of every metric over completed runs.
#[pyclass(name = "AggregateReport", module = "pyqforecast")]
struct PyAggregateReport {
    inner: AggregateReport,
    runs_json: Vec<String>,
}

#[pymethods]
impl PyAggregateReport {
    #[getter]
    fn runs(&self) -> usize {
        self.inner.runs
    }

    #[getter]
    fn requested(&self) -> usize {
        self.inner.requested
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Mean over runs of the median-quantile mean RMSE.
    #[getter]
    fn mean_rmse(&self) -> Option<f64> {
        self.inner.cell(Metric::MeanRmse, "all").map(|c| c.mean)
    }

    /// `(metric, step_or_quantile, mean, half_width)` tuples.
    fn cells(&self) -> Vec<(String, String, f64, f64)> {
        self.inner
            .cells
            .iter()
            .map(|c| (c.metric.as_str().to_string(), c.key.clone(), c.mean, c.half_width))
            .collect()
    }

    /// Per-run reports as JSON documents.
    fn run_reports(&self) -> Vec<String> {
        self.runs_json.clone()
    }

    fn to_csv(&self) -> PyResult<String> {
        aggregate_csv(&[&self.inner]).map_err(runtime_err)
    }

    fn table_csv(&self) -> PyResult<String> {
        horizon_table_csv(&[&self.inner]).map_err(runtime_err)
    }
}

/// Runs every seed of a configuration and aggregates the results.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &PyExperimentConfig) -> PyResult<PyAggregateReport> {
    let cfg = config.inner.clone();
    let out = py.detach(move || run_campaign(&cfg)).map_err(eval_err)?;
    let runs_json = out
        .runs
        .iter()
        .map(|r| serde_json::to_string(&r.report).map_err(runtime_err))
        .collect::<PyResult<_>>()?;
    Ok(PyAggregateReport {
        inner: out.aggregate,
        runs_json,
    })
}

/// Trains one run of `config` on an in-memory univariate series. Returns
/// the model and its run report as JSON.
#[pyfunction]
#[pyo3(signature = (config, values, seed=1))]
fn train_series(
    py: Python<'_>,
    config: &PyExperimentConfig,
    values: Vec<f64>,
    seed: u64,
) -> PyResult<(PyModel, String)> {
    let cfg = config.inner.clone();
    let series = RawSeries::univariate("series", "Value", values);
    let run = py
        .detach(move || run_single(&cfg, &series, "Value", seed))
        .map_err(eval_err)?;
    let report = serde_json::to_string(&run.report).map_err(runtime_err)?;
    Ok((PyModel { inner: run.model }, report))
}

/// Pinball loss of prediction `y_hat` for observation `y` at level `q`.
#[pyfunction]
fn pinball(y: f64, y_hat: f64, q: f64) -> PyResult<f64> {
    qforecast::loss::pinball(y, y_hat, q).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (steps=3000, seed=0))]
fn mackey_glass(steps: usize, seed: u64) -> PyResult<Vec<f64>> {
    let p = MackeyGlassParams {
        steps,
        ..MackeyGlassParams::default()
    };
    Ok(gen_mackey_glass(&p, seed).map_err(value_err)?.column(0))
}

/// `(x, y, z)` trajectories of the Lorenz system.
#[pyfunction]
#[pyo3(signature = (steps=10000))]
fn lorenz(steps: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let p = LorenzParams {
        steps,
        ..LorenzParams::default()
    };
    let s = gen_lorenz(&p).map_err(value_err)?.full;
    Ok((s.column(0), s.column(1), s.column(2)))
}

/// `(name, max_rel_error, passed)` for every op kind and model family.
#[pyfunction]
#[pyo3(signature = (trials=10))]
fn gradcheck(py: Python<'_>, trials: u64) -> Vec<(String, f64, bool)> {
    py.detach(move || suite::run(trials))
        .into_iter()
        .map(|e| (e.name, e.max_rel_error, e.passed))
        .collect()
}

#[pymodule]
fn pyqforecast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyAggregateReport>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(train_series, m)?)?;
    m.add_function(wrap_pyfunction!(pinball, m)?)?;
    m.add_function(wrap_pyfunction!(mackey_glass, m)?)?;
    m.add_function(wrap_pyfunction!(lorenz, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

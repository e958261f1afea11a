use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{coverage, crossing_rate, quantile_rmse_table};
use super::report::{
    aggregate_csv, horizon_table_csv, quantile_table_csv, rmse_chart_svg, AggregateReport,
    ReportMeta, RunReport,
};
use super::{EvalError, Strategy};
use crate::data::{
    gen_lorenz, gen_mackey_glass, load_csv, make_windows, LorenzParams, MackeyGlassParams,
    NormalizeScope, RawSeries, Schema, WindowedDataset,
};
use crate::engine::rng::{streams, SeededRng};
use crate::engine::Tensor;
use crate::linear::{fit_ols, fit_quantile_linear, QuantileFitOptions};
use crate::loss::{Arrangement, QuantileSet};
use crate::models::{build_model, Family, Model, ModelSpec};
use crate::train::{train_from, LossKind, TrainConfig, TrainError, TrainingState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    MackeyGlass,
    Lorenz,
    /// Daily market CSV with Date, High, Low, Open, Close, Volume.
    Crypto,
    /// CSV with Date (or Step) and Value.
    Univariate,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::MackeyGlass => "mackey-glass",
            DatasetKind::Lorenz => "lorenz",
            DatasetKind::Crypto => "crypto",
            DatasetKind::Univariate => "univariate",
        }
    }

    pub fn is_generated(self) -> bool {
        matches!(self, DatasetKind::MackeyGlass | DatasetKind::Lorenz)
    }
}

impl FromStr for DatasetKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mackey-glass" | "mackeyglass" | "mg" => Ok(DatasetKind::MackeyGlass),
            "lorenz" => Ok(DatasetKind::Lorenz),
            "crypto" => Ok(DatasetKind::Crypto),
            "univariate" | "csv" => Ok(DatasetKind::Univariate),
            _ => Err(EvalError::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Input file for `crypto` and `univariate`.
    pub path: Option<PathBuf>,
    /// Target column; defaults to Close, Value or the Lorenz component.
    pub target: Option<String>,
    /// Keep every `stride`-th observation.
    pub stride: Option<usize>,
    /// Keep the first `limit` observations, after striding.
    pub limit: Option<usize>,
    /// Seed of generated series, shared by every run of an experiment.
    pub data_seed: u64,
    pub mackey_glass: MackeyGlassParams,
    pub lorenz: LorenzParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::MackeyGlass,
            path: None,
            target: None,
            stride: None,
            limit: None,
            data_seed: 0,
            mackey_glass: MackeyGlassParams::default(),
            lorenz: LorenzParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub strategy: Strategy,
    pub family: Family,
    /// Train on the pinball loss over `quantiles`; otherwise squared error
    /// on a single output per horizon.
    pub quantile: bool,
    pub quantiles: Vec<f64>,
    pub window: usize,
    pub horizons: usize,
    /// Recurrent sizes; the family default when absent.
    pub hidden: Option<(usize, usize)>,
    pub arrangement: Arrangement,
    /// `loss` is derived from `quantile` and `seed` from the run seed.
    pub train: TrainConfig,
    pub runs: usize,
    pub base_seed: u64,
    pub normalize: NormalizeScope,
    /// Report RMSE in the units of the raw series.
    pub denormalized_metrics: bool,
    pub output_dir: Option<PathBuf>,
    pub save_models: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(DatasetKind::MackeyGlass)
    }
}

impl ExperimentConfig {
    /// Defaults for a dataset: `d = 6, m = 5`, 100 epochs and the
    /// multivariate strategy for market data; `d = 5, m = 10` and 300 epochs
    /// otherwise.
    pub fn preset(kind: DatasetKind) -> Self {
        let market = kind == DatasetKind::Crypto;
        Self {
            name: format!("{}-edlstm", kind.as_str()),
            dataset: DatasetConfig {
                kind,
                ..DatasetConfig::default()
            },
            strategy: if market {
                Strategy::Multivariate
            } else {
                Strategy::Univariate
            },
            family: Family::EdLstm,
            quantile: true,
            quantiles: QuantileSet::DEFAULT_LEVELS.to_vec(),
            window: if market { 6 } else { 5 },
            horizons: if market { 5 } else { 10 },
            hidden: None,
            arrangement: Arrangement::default(),
            train: TrainConfig {
                epochs: if market { 100 } else { 300 },
                ..TrainConfig::default()
            },
            runs: 30,
            base_seed: 1,
            normalize: NormalizeScope::default(),
            denormalized_metrics: false,
            output_dir: None,
            save_models: false,
        }
    }

    /// Parses a TOML document over the preset of its `dataset.kind`.
    pub fn from_toml_str(text: &str) -> Result<Self, EvalError> {
        let file: toml::Table = toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        let file = serde_json::to_value(file)?;
        let kind = match file.pointer("/dataset/kind").and_then(|v| v.as_str()) {
            Some(k) => k.parse()?,
            None => DatasetKind::default(),
        };
        Self::preset(kind).overlay(file)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Replaces the fields present in `patch`, recursing into tables.
    pub fn overlay(&self, patch: serde_json::Value) -> Result<Self, EvalError> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| EvalError::Config(e.to_string()))
    }

    pub fn quantile_set(&self) -> Result<QuantileSet, EvalError> {
        if !self.quantile {
            return Ok(QuantileSet::median_only());
        }
        let q = QuantileSet::new(self.quantiles.clone())?;
        q.median_index()?;
        Ok(q)
    }

    pub fn loss(&self) -> LossKind {
        if self.quantile {
            LossKind::Quantile
        } else {
            LossKind::Mse
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            loss: self.loss(),
            ..self.train.clone()
        }
    }

    pub fn model_spec(&self, features: usize) -> Result<ModelSpec, EvalError> {
        let (h1, h2) = self.hidden.unwrap_or_else(|| self.family.default_hidden());
        let spec = ModelSpec::new(self.family, features, self.window, self.horizons)
            .with_hidden(h1, h2)
            .with_quantiles(self.quantile_set()?)
            .with_arrangement(self.arrangement);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(EvalError::Config(format!(
                "experiment name `{}` must be a non-empty file name",
                self.name
            )));
        }
        if self.runs < 1 {
            return Err(EvalError::Config("runs must be >= 1".into()));
        }
        if self.dataset.stride == Some(0) || self.dataset.limit == Some(0) {
            return Err(EvalError::Config("stride and limit must be >= 1".into()));
        }
        if !self.dataset.kind.is_generated() && self.dataset.path.is_none() {
            return Err(EvalError::Config(format!(
                "dataset `{}` needs a path",
                self.dataset.kind.as_str()
            )));
        }
        self.train_config(self.base_seed).validate()?;
        self.model_spec(1)?;
        Ok(())
    }

    pub fn report_meta(&self) -> Result<ReportMeta, EvalError> {
        Ok(ReportMeta {
            family: self.family,
            strategy: self.strategy,
            quantile: self.quantile,
            quantiles: self.quantile_set()?.levels().to_vec(),
            horizons: self.horizons,
            requested: self.runs,
            config_hash: config_hash(self)?,
        })
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// SHA-256 of the configuration with the output location cleared.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String, EvalError> {
    let mut canonical = cfg.clone();
    canonical.output_dir = None;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The series the experiment windows, reduced to the input columns of its
/// strategy, and the name of the target column.
pub fn load_series(cfg: &ExperimentConfig) -> Result<(RawSeries, String), EvalError> {
    let d = &cfg.dataset;
    let (mut series, default_target) = match d.kind {
        DatasetKind::MackeyGlass => (
            gen_mackey_glass(&d.mackey_glass, d.data_seed)?,
            "Value".to_string(),
        ),
        DatasetKind::Lorenz => {
            let s = gen_lorenz(&d.lorenz)?;
            let target = s.component.columns()[0].clone();
            (s.full, target)
        }
        DatasetKind::Crypto | DatasetKind::Univariate => {
            let schema = if d.kind == DatasetKind::Crypto {
                Schema::Crypto
            } else {
                Schema::Univariate
            };
            let path = d.path.as_deref().ok_or_else(|| {
                EvalError::Config(format!("dataset `{}` needs a path", d.kind.as_str()))
            })?;
            (load_csv(path, schema)?, schema.target().to_string())
        }
    };
    if let Some(stride) = d.stride {
        series = series.downsample(stride);
    }
    if let Some(limit) = d.limit {
        series = series.truncate(limit.min(series.len()));
    }
    let target = d.target.clone().unwrap_or(default_target);
    let t = series.column_index(&target).ok_or_else(|| {
        EvalError::Config(format!("series has no column `{target}`"))
    })?;
    let target = series.columns()[t].clone();
    match cfg.strategy {
        Strategy::Univariate => series = series.select(&[t]),
        Strategy::Multivariate if series.features() < 2 => {
            return Err(EvalError::Config(format!(
                "multivariate strategy needs several columns; `{}` has one",
                d.kind.as_str()
            )))
        }
        Strategy::Multivariate => {}
    }
    Ok((series, target))
}

/// Windows, scaling and the 80:20 split of run `seed`.
pub fn prepare_dataset(
    cfg: &ExperimentConfig,
    series: &RawSeries,
    target: &str,
    seed: u64,
) -> Result<WindowedDataset, EvalError> {
    Ok(make_windows(series, cfg.window, cfg.horizons, target)?
        .normalize_and_split_with(seed, cfg.normalize)?)
}

/// Fits the configured model on the training windows. Neural families
/// start from `resume` when given, else from seeded initial parameters.
pub fn train_run(
    cfg: &ExperimentConfig,
    ds: &WindowedDataset,
    seed: u64,
    resume: Option<TrainingState>,
    on_checkpoint: &mut dyn FnMut(&TrainingState) -> Result<(), TrainError>,
) -> Result<(Model, Vec<f64>), EvalError> {
    let spec = cfg.model_spec(ds.features())?;
    if cfg.family == Family::Linear {
        return if cfg.quantile {
            let fit = fit_quantile_linear(ds, &spec.quantiles, QuantileFitOptions::default())?;
            Ok((fit.model.into_model(), fit.trace))
        } else {
            Ok((fit_ols(ds)?.into_model(), Vec::new()))
        };
    }
    let tc = cfg.train_config(seed);
    let state = match resume {
        Some(state) => {
            if state.model.spec() != &spec {
                return Err(EvalError::Config(
                    "checkpoint model does not match the configuration".into(),
                ));
            }
            state
        }
        None => {
            let model = build_model(&spec, &mut SeededRng::new(seed).split(streams::INIT))?;
            TrainingState::new(model, &tc)
        }
    };
    let state = train_from(state, ds, &tc, on_checkpoint)?;
    Ok((state.model, state.trace))
}

/// Test-window predictions `[n, m, K]`, their targets `[n, m]` and the
/// metrics of one run. `seed`, `final_loss` and `seconds` are left for the
/// caller.
pub fn evaluate_model(
    model: &Model,
    ds: &WindowedDataset,
    denormalized: bool,
) -> Result<(RunReport, Tensor, Tensor), EvalError> {
    let ids = ds.test_indices();
    if ids.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let mut preds = model.predict_batched(&ds.inputs(ids), 256)?;
    let mut targets = ds.targets(ids);
    if denormalized {
        preds = preds.map(|v| ds.denormalize_target(v));
        targets = targets.map(|v| ds.denormalize_target(v));
    }
    let q = &model.spec().quantiles;
    let table = quantile_rmse_table(&targets, &preds, q)?;
    let median = q.median_index()?;
    let horizon_rmse = table[median].per_horizon.clone();
    let mean_rmse = horizon_rmse.iter().sum::<f64>() / horizon_rmse.len() as f64;
    let levels = q.levels();
    let (coverage, crossing_rate) = if levels.len() >= 2 {
        (
            Some(coverage(&targets, &preds, q, levels[0], levels[levels.len() - 1])?),
            Some(crossing_rate(&preds, q)?),
        )
    } else {
        (None, None)
    };
    let report = RunReport {
        seed: 0,
        quantiles: levels.to_vec(),
        horizon_rmse,
        quantile_rmse: table.iter().map(|r| r.mean).collect(),
        mean_rmse,
        coverage,
        crossing_rate,
        final_loss: None,
        seconds: 0.0,
    };
    Ok((report, preds, targets))
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub model: Model,
    pub trace: Vec<f64>,
    /// Test windows of the run, in ascending order.
    pub test_indices: Vec<usize>,
    pub predictions: Tensor,
    pub targets: Tensor,
}

/// Trains and evaluates one run of the experiment.
pub fn run_single(
    cfg: &ExperimentConfig,
    series: &RawSeries,
    target: &str,
    seed: u64,
) -> Result<RunArtifacts, EvalError> {
    let start = Instant::now();
    let ds = prepare_dataset(cfg, series, target, seed)?;
    let (model, trace) = train_run(cfg, &ds, seed, None, &mut |_| Ok(()))?;
    let (mut report, predictions, targets) = evaluate_model(&model, &ds, cfg.denormalized_metrics)?;
    report.seed = seed;
    report.final_loss = trace.last().copied();
    report.seconds = start.elapsed().as_secs_f64();
    log::info!(
        "run {seed}: mean RMSE {:.5} in {:.1}s",
        report.mean_rmse,
        report.seconds
    );
    Ok(RunArtifacts {
        report,
        model,
        trace,
        test_indices: ds.test_indices().to_vec(),
        predictions,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub aggregate: AggregateReport,
    /// Completed runs in seed order.
    pub runs: Vec<RunArtifacts>,
    pub failures: Vec<RunFailure>,
}

/// Runs seeds `base_seed..base_seed + runs` in parallel. Failed runs are
/// recorded and excluded from the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, EvalError> {
    cfg.validate()?;
    let (series, target) = load_series(cfg)?;
    // Surface window and scaling problems once, as configuration errors.
    prepare_dataset(cfg, &series, &target, cfg.base_seed)?;
    cfg.model_spec(series.features())?;

    let seeds: Vec<u64> = (0..cfg.runs as u64).map(|r| cfg.base_seed + r).collect();
    let results: Vec<(u64, Result<RunArtifacts, EvalError>)> = seeds
        .par_iter()
        .map(|&seed| (seed, run_single(cfg, &series, &target, seed)))
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::warn!("run {seed} failed: {e}");
                failures.push(RunFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if runs.is_empty() {
        return Err(EvalError::NoCompletedRuns {
            requested: cfg.runs,
        });
    }
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    let aggregate = AggregateReport::from_runs(cfg.report_meta()?, &reports);
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        aggregate,
        runs,
        failures,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Aggregate CSV and JSON, wide tables and the RMSE chart of one aggregate.
pub fn write_aggregate(dir: &Path, aggregate: &AggregateReport, title: &str) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("aggregate.json"), aggregate)?;
    fs::write(dir.join("aggregate.csv"), aggregate_csv(&[aggregate])?)?;
    fs::write(dir.join("table.csv"), horizon_table_csv(&[aggregate])?)?;
    if aggregate.quantile {
        fs::write(dir.join("quantiles.csv"), quantile_table_csv(&[aggregate])?)?;
    }
    fs::write(dir.join("rmse.svg"), rmse_chart_svg(&[aggregate], title))?;
    Ok(())
}

/// Prediction-vs-actual trace of one run: one row per test window and step
/// with a column per quantile level.
fn predictions_csv(run: &RunArtifacts) -> Result<String, EvalError> {
    let levels = &run.report.quantiles;
    let k = levels.len();
    let m = run.report.horizon_rmse.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["window".to_string(), "step".into(), "actual".into()];
    header.extend(levels.iter().map(|q| format!("q{q}")));
    w.write_record(&header)?;
    let (y, p) = (run.targets.data(), run.predictions.data());
    for (row, &window) in run.test_indices.iter().enumerate() {
        for h in 0..m {
            let cell = row * m + h;
            let mut rec = vec![window.to_string(), (h + 1).to_string(), y[cell].to_string()];
            rec.extend((0..k).map(|j| p[cell * k + j].to_string()));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes the experiment under `root/<name>/` and returns that directory.
pub fn persist_experiment(outcome: &ExperimentOutcome, root: &Path) -> Result<PathBuf, EvalError> {
    let cfg = &outcome.config;
    let dir = root.join(&cfg.name);
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    for run in &outcome.runs {
        write_json(&runs_dir.join(format!("run-{}.json", run.report.seed)), &run.report)?;
        if cfg.save_models {
            run.model
                .save(&runs_dir.join(format!("model-{}.json", run.report.seed)))?;
        }
    }
    if !outcome.failures.is_empty() {
        write_json(&dir.join("failures.json"), &outcome.failures)?;
    }
    let title = format!(
        "{} on {}",
        outcome.aggregate.model_label(),
        cfg.dataset.kind.as_str()
    );
    write_aggregate(&dir, &outcome.aggregate, &title)?;
    if let Some(first) = outcome.runs.first() {
        fs::write(dir.join("predictions.csv"), predictions_csv(first)?)?;
    }
    Ok(dir)
}

/// Rebuilds the aggregate of a persisted experiment from its run reports.
pub fn reaggregate(dir: &Path) -> Result<(ExperimentConfig, AggregateReport), EvalError> {
    let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let mut reports = Vec::new();
    for entry in fs::read_dir(dir.join("runs"))? {
        let path = entry?.path();
        let is_run = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"));
        if is_run {
            reports.push(serde_json::from_str::<RunReport>(&fs::read_to_string(&path)?)?);
        }
    }
    if reports.is_empty() {
        return Err(EvalError::NoCompletedRuns { requested: cfg.runs });
    }
    reports.sort_by_key(|r| r.seed);
    let aggregate = AggregateReport::from_runs(cfg.report_meta()?, &reports);
    Ok((cfg, aggregate))
}

//! Evaluation metrics, multi-run experiments and report emission.

mod experiment;
mod metrics;
mod report;


use serde::{Deserialize, Serialize};

pub use experiment::{
    config_hash, evaluate_model, load_series, persist_experiment, prepare_dataset, reaggregate,
    run_experiment, run_single, train_run, write_aggregate, DatasetConfig, DatasetKind, ExperimentConfig, ExperimentOutcome,
    RunArtifacts, RunFailure,
};
pub use metrics::{coverage, crossing_rate, quantile_rmse, quantile_rmse_table, rmse, Rmse};
pub use report::{
    aggregate_csv, horizon_table_csv, mean_and_half_width, parse_aggregate_csv,
    quantile_table_csv, rmse_chart_svg, AggregateReport, AggregateRow, Cell, Metric, ReportMeta,
    RunReport,
};

use crate::data::DataError;
use crate::linear::LinearError;
use crate::loss::LossError;
use crate::models::ModelError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("quantile level {0} is not in the model's quantile set")]
    MissingQuantile(f64),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("none of the {requested} runs completed")]
    NoCompletedRuns { requested: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl EvalError {
    /// Whether the failure stems from the request rather than from running it.
    pub fn is_config_error(&self) -> bool {
        match self {
            EvalError::Config(_) | EvalError::MissingQuantile(_) => true,
            EvalError::Data(e) => matches!(
                e,
                DataError::InvalidParams(_)
                    | DataError::InsufficientData { .. }
                    | DataError::Schema(_)
            ),
            EvalError::Train(TrainError::Config(_)) => true,
            EvalError::Model(ModelError::Config(_)) => true,
            EvalError::Loss(
                LossError::InvalidQuantile(_)
                | LossError::UnsortedQuantiles(_)
                | LossError::EmptyQuantiles
                | LossError::MissingMedian(_),
            ) => true,
            _ => false,
        }
    }
}

/// Which columns feed the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Target column only.
    #[default]
    Univariate,
    /// Every column of the series.
    Multivariate,
}

impl std::str::FromStr for Strategy {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "univariate" | "uni" => Ok(Strategy::Univariate),
            "multivariate" | "multi" => Ok(Strategy::Multivariate),
            _ => Err(EvalError::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

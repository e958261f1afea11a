//! Adam and the epoch loop.
//!
//! A run is single-threaded and fully determined by the model's initial
//! parameters, the dataset split and [`TrainConfig`]. The shuffle order of
//! epoch `e` depends only on `(seed, e)`, so a run resumed from a
//! [`TrainingState`] checkpoint continues bit-for-bit.

mod adam;
mod checkpoint;

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::TRAINING_FORMAT;

use crate::data::WindowedDataset;
use crate::engine::rng::{streams, SeededRng};
use crate::engine::{EngineError, Graph, Tensor};
use crate::loss::{mse_node, quantile_loss_batch, quantile_loss_node, LossError, LossValue};
use crate::models::{Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter `{param}`")]
    Numerical { param: String },
    #[error("training diverged in epoch {epoch}")]
    TrainingDiverged {
        epoch: usize,
        /// Parameters before the failing update.
        last_good: Box<Model>,
    },
    #[error("bad training checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Quantile,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Emit a checkpoint every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Epoch `e` uses `learning_rate * lr_decay^e`; constant when absent.
    pub lr_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            loss: LossKind::Quantile,
            clip_norm: None,
            checkpoint_every: None,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(g) => self.learning_rate * g.powi(epoch as i32),
            None => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip norm must be positive");
        }
        if matches!(self.lr_decay, Some(g) if !(g > 0.0 && g <= 1.0)) {
            return bad("learning-rate decay must be in (0, 1]");
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint cadence must be >= 1");
        }
        Ok(())
    }
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// completed epochs and the loss trace so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: Model,
    pub adam: AdamState,
    pub epoch: usize,
    pub trace: Vec<f64>,
}

impl TrainingState {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let adam = AdamState::new(model.params(), config.learning_rate);
        Self {
            model,
            adam,
            epoch: 0,
            trace: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Sample-weighted mean training loss of each epoch.
    pub trace: Vec<f64>,
}

fn check_compat(model: &Model, ds: &WindowedDataset, config: &TrainConfig) -> Result<(), TrainError> {
    config.validate()?;
    let spec = model.spec();
    if config.loss == LossKind::Mse && spec.quantiles.len() != 1 {
        return Err(TrainError::Config(format!(
            "mse loss needs a single output per horizon, model has {}",
            spec.quantiles.len()
        )));
    }
    if spec.window != ds.window() || spec.features != ds.features() || spec.horizons != ds.horizons()
    {
        return Err(TrainError::Config(format!(
            "model expects d={}, f={}, m={} but dataset has d={}, f={}, m={}",
            spec.window,
            spec.features,
            spec.horizons,
            ds.window(),
            ds.features(),
            ds.horizons()
        )));
    }
    if ds.train_indices().is_empty() {
        return Err(TrainError::Config("dataset has no training windows".into()));
    }
    Ok(())
}

/// Shuffle stream for one epoch.
fn epoch_rng(seed: u64, epoch: usize) -> SeededRng {
    let mixed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    SeededRng::new(mixed).split(streams::SHUFFLE)
}

fn batch_loss(
    model: &Model,
    g: &mut Graph,
    x: Tensor,
    y: Tensor,
    kind: LossKind,
) -> Result<crate::engine::NodeId, TrainError> {
    let xn = g.input(x);
    let yn = g.input(y);
    let pred = model.forward(g, xn)?;
    Ok(match kind {
        LossKind::Quantile => quantile_loss_node(g, yn, pred, &model.spec().quantiles)?,
        LossKind::Mse => mse_node(g, yn, pred)?,
    })
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(ModelError::Numerical { .. })
            | TrainError::Engine(EngineError::NonFinite { .. })
            | TrainError::Loss(LossError::Engine(EngineError::NonFinite { .. }))
    )
}

pub fn train(model: Model, ds: &WindowedDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let state = train_from(TrainingState::new(model, config), ds, config, &mut |_| Ok(()))?;
    Ok(TrainOutcome {
        model: state.model,
        trace: state.trace,
    })
}

/// Runs the remaining epochs of `state`, calling `on_checkpoint` at the
/// configured cadence.
pub fn train_from(
    mut state: TrainingState,
    ds: &WindowedDataset,
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&TrainingState) -> Result<(), TrainError>,
) -> Result<TrainingState, TrainError> {
    check_compat(&state.model, ds, config)?;
    if state.adam.m.len() != state.model.params().len() {
        return Err(TrainError::Checkpoint("optimizer state does not match model".into()));
    }
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        state.adam.lr = config.learning_rate_at(epoch);
        let mut order = ds.train_indices().to_vec();
        epoch_rng(config.seed, epoch).shuffle(&mut order);

        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let diverged = |state: &TrainingState| TrainError::TrainingDiverged {
                epoch,
                last_good: Box::new(state.model.clone()),
            };
            let mut g = Graph::with_params(state.model.params());
            let loss = match batch_loss(
                &state.model,
                &mut g,
                ds.inputs(batch),
                ds.targets(batch),
                config.loss,
            ) {
                Ok(l) => l,
                Err(e) if is_divergence(&e) => return Err(diverged(&state)),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(&state));
            }
            total += value * batch.len() as f64;

            let mut grads = g.backward(loss)?;
            if let Some(limit) = config.clip_norm {
                let norm = grads.global_norm();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            let before = state.model.params().clone();
            adam_step(state.model.params_mut(), &grads, &mut state.adam)?;
            if state.model.params().iter().any(|(_, _, p)| !p.all_finite()) {
                *state.model.params_mut() = before;
                return Err(diverged(&state));
            }
        }
        state.trace.push(total / order.len() as f64);
        state.epoch += 1;
        if config
            .checkpoint_every
            .is_some_and(|every| state.epoch % every == 0)
        {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// Loss of a frozen model over the given windows, accumulated in batches
/// of `batch` rows and weighted by batch size.
pub fn loss_eval(
    model: &Model,
    ds: &WindowedDataset,
    ids: &[usize],
    kind: LossKind,
    batch: usize,
) -> Result<LossValue, TrainError> {
    if ids.is_empty() {
        return Err(TrainError::Config("no windows to evaluate".into()));
    }
    let spec = model.spec();
    let (m, k) = (spec.horizons, spec.quantiles.len());
    let mut cells = vec![0.0; m * k];
    for chunk in ids.chunks(batch.max(1)) {
        let targets = ds.targets(chunk);
        let preds = model.forward_pass(&ds.inputs(chunk))?;
        let part = match kind {
            LossKind::Quantile => quantile_loss_batch(&targets, &preds, &spec.quantiles)?,
            LossKind::Mse => squared_error_cells(&targets, &preds)?,
        };
        let weight = chunk.len() as f64 / ids.len() as f64;
        for (acc, v) in cells.iter_mut().zip(part.breakdown.data()) {
            *acc += weight * v;
        }
    }
    let total = cells.iter().sum::<f64>() / cells.len() as f64;
    Ok(LossValue {
        total,
        breakdown: Tensor::from_vec(&[m, k], cells)?,
    })
}

fn squared_error_cells(targets: &Tensor, preds: &Tensor) -> Result<LossValue, TrainError> {
    let (b, m) = (targets.shape()[0], targets.shape()[1]);
    if preds.len() != b * m {
        return Err(LossError::Shape(targets.shape().to_vec(), preds.shape().to_vec()).into());
    }
    let mut cells = vec![0.0; m];
    for (i, (y, p)) in targets.data().iter().zip(preds.data()).enumerate() {
        cells[i % m] += (y - p) * (y - p) / b as f64;
    }
    let total = cells.iter().sum::<f64>() / m as f64;
    Ok(LossValue {
        total,
        breakdown: Tensor::from_vec(&[m, 1], cells)?,
    })
}

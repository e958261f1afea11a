//! Resumable training checkpoints.
//!
//! The model is stored exactly as in a model checkpoint; optimizer moments,
//! hyperparameters and the loss trace use the same hex encoding so that a
//! resumed run is bit-identical to an uninterrupted one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, TrainError, TrainingState};
use crate::models::checkpoint::{decode_f64, encode_f64, HexTensor, ModelCheckpoint};

pub const TRAINING_FORMAT: &str = "qforecast-training";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdamRecord {
    lr: String,
    beta1: String,
    beta2: String,
    eps: String,
    t: u64,
    m: Vec<HexTensor>,
    v: Vec<HexTensor>,
}

#[derive(Serialize, Deserialize)]
struct TrainingRecord {
    format: String,
    version: u32,
    epoch: usize,
    trace: Vec<String>,
    adam: AdamRecord,
    model: ModelCheckpoint,
}

fn decode(s: &str) -> Result<f64, TrainError> {
    Ok(decode_f64(s)?)
}

impl TrainingState {
    pub fn to_checkpoint_string(&self) -> String {
        let names: Vec<&str> = self.model.params().iter().map(|(_, n, _)| n).collect();
        let moments = |ts: &[crate::engine::Tensor]| {
            ts.iter()
                .zip(&names)
                .map(|(t, n)| HexTensor::encode(n, t))
                .collect()
        };
        let record = TrainingRecord {
            format: TRAINING_FORMAT.into(),
            version: VERSION,
            epoch: self.epoch,
            trace: self.trace.iter().map(|&v| encode_f64(v)).collect(),
            adam: AdamRecord {
                lr: encode_f64(self.adam.lr),
                beta1: encode_f64(self.adam.beta1),
                beta2: encode_f64(self.adam.beta2),
                eps: encode_f64(self.adam.eps),
                t: self.adam.t,
                m: moments(&self.adam.m),
                v: moments(&self.adam.v),
            },
            model: ModelCheckpoint::from_model(&self.model),
        };
        serde_json::to_string_pretty(&record).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self, TrainError> {
        let record: TrainingRecord =
            serde_json::from_str(s).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if record.format != TRAINING_FORMAT || record.version != VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format {} v{}",
                record.format, record.version
            )));
        }
        let model = record.model.into_model()?;
        let moments = |hs: &[HexTensor]| -> Result<Vec<_>, TrainError> {
            if hs.len() != model.params().len() {
                return Err(TrainError::Checkpoint("moment count mismatch".into()));
            }
            hs.iter()
                .zip(model.params().iter())
                .map(|(h, (_, name, p))| {
                    let t = h.decode()?;
                    if h.name != name || t.shape() != p.shape() {
                        return Err(TrainError::Checkpoint(format!(
                            "moment `{}` does not match parameter `{name}`",
                            h.name
                        )));
                    }
                    Ok(t)
                })
                .collect()
        };
        let adam = AdamState {
            lr: decode(&record.adam.lr)?,
            beta1: decode(&record.adam.beta1)?,
            beta2: decode(&record.adam.beta2)?,
            eps: decode(&record.adam.eps)?,
            t: record.adam.t,
            m: moments(&record.adam.m)?,
            v: moments(&record.adam.v)?,
        };
        let trace = record
            .trace
            .iter()
            .map(|s| decode(s))
            .collect::<Result<Vec<_>, _>>()?;
        if trace.len() != record.epoch {
            return Err(TrainError::Checkpoint("trace length differs from epoch".into()));
        }
        Ok(Self {
            model,
            adam,
            epoch: record.epoch,
            trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

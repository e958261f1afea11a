//! Model checkpoint container.
//!
//! A checkpoint is a JSON document:
//!
//! ```json
//! {
//!   "format": "qforecast-model",
//!   "version": 1,
//!   "spec": { "family": "edlstm", "features": 1, ... },
//!   "params": [
//!     { "name": "encoder.wx", "shape": [1, 400], "data": ["3fb99999999999a0", ...] }
//!   ]
//! }
//! ```
//!
//! Every value is written as the 16 lowercase hex digits of its IEEE-754
//! bit pattern, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, ModelSpec};
use crate::engine::{ParamSet, Tensor};

pub const MODEL_FORMAT: &str = "qforecast-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<String>,
}

impl HexTensor {
    pub fn encode(name: &str, tensor: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().iter().map(|&v| encode_f64(v)).collect(),
        }
    }

    pub fn decode(&self) -> Result<Tensor, ModelError> {
        let data = self
            .data
            .iter()
            .map(|s| {
                decode_f64(s).map_err(|_| {
                    ModelError::Checkpoint(format!("bad hex value `{s}` in `{}`", self.name))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::from_vec(&self.shape, data)?)
    }
}

pub fn encode_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn decode_f64(s: &str) -> Result<f64, ModelError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| ModelError::Checkpoint(format!("bad hex value `{s}`")))
}

pub fn encode_params(params: &ParamSet) -> Vec<HexTensor> {
    params
        .iter()
        .map(|(_, name, t)| HexTensor::encode(name, t))
        .collect()
}

pub fn decode_params(entries: &[HexTensor]) -> Result<ParamSet, ModelError> {
    let mut params = ParamSet::new();
    for e in entries {
        if params.find(&e.name).is_some() {
            return Err(ModelError::Checkpoint(format!(
                "duplicate parameter `{}`",
                e.name
            )));
        }
        params.add(e.name.clone(), e.decode()?);
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub params: Vec<HexTensor>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: FORMAT_VERSION,
            spec: model.spec().clone(),
            params: encode_params(model.params()),
        }
    }

    pub fn into_model(self) -> Result<Model, ModelError> {
        if self.format != MODEL_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unexpected format `{}`",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        Model::from_parts(self.spec, decode_params(&self.params)?)
    }
}

impl Model {
    pub fn to_checkpoint_string(&self) -> String {
        serde_json::to_string_pretty(&ModelCheckpoint::from_model(self))
            .expect("checkpoint serializes")
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self, ModelError> {
        let ckpt: ModelCheckpoint =
            serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        ckpt.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

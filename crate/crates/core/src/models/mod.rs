//! Recurrent forecasting architectures.
//!
//! Every family maps a window batch `[B, d, f]` to predictions
//! `[B, m, K]` (`K` quantile levels). Parameter shapes, with `H1`, `H2` the
//! hidden sizes, `F` the conv filter count and `k` the kernel size:
//!
//! | family   | parameters |
//! |----------|------------|
//! | lstm     | `lstm1` (f -> H1), `lstm2` (H1 -> H2), `head.w [H2, mK]`, `head.b [mK]` |
//! | bdlstm   | `fwd`, `bwd` (f -> H1 each), `lstm2` (2 H1 -> H2), `head.w [H2, mK]`, `head.b` |
//! | edlstm   | `encoder` (f -> H1), `decoder` (H1 -> H2), `head.w [H2, K]`, `head.b [K]` |
//! | convlstm | `conv.w [k, 1, F]` (f = 1) or `[k, f, 1, F]` (f > 1), `conv.b [F]`, `lstm` (F -> H1), `head.w [H1, mK]`, `head.b` |
//! | linear   | `head.w [d f, mK]`, `head.b [mK]` |
//!
//! LSTM layer shapes are listed on [`LstmLayer`]. The dense head is linear
//! (identity activation) and emits horizon-major outputs; the encoder-decoder
//! head is applied per decoder step.

pub mod checkpoint;
mod lstm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Fill, Graph, NodeId, ParamId, ParamSet, SeededRng, Tensor};
use crate::loss::{Arrangement, QuantileSet};

pub use lstm::{lstm_cell_step, LstmLayer, LstmNodes};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite values in layer `{layer}`")]
    Numerical { layer: String },
    #[error("input shape {got:?}, expected [batch, {window}, {features}]")]
    InputShape {
        got: Vec<usize>,
        window: usize,
        features: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lstm,
    BdLstm,
    EdLstm,
    ConvLstm,
    Linear,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Lstm,
        Family::BdLstm,
        Family::EdLstm,
        Family::ConvLstm,
        Family::Linear,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Lstm => "lstm",
            Family::BdLstm => "bdlstm",
            Family::EdLstm => "edlstm",
            Family::ConvLstm => "convlstm",
            Family::Linear => "linear",
        }
    }

    /// Display name used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Family::Lstm => "LSTM",
            Family::BdLstm => "BD-LSTM",
            Family::EdLstm => "ED-LSTM",
            Family::ConvLstm => "Conv-LSTM",
            Family::Linear => "Linear",
        }
    }

    /// Hidden sizes `(h1, h2)` used for the cryptocurrency experiments.
    pub fn default_hidden(self) -> (usize, usize) {
        match self {
            Family::Lstm | Family::BdLstm => (50, 50),
            Family::EdLstm => (100, 100),
            Family::ConvLstm => (20, 20),
            Family::Linear => (1, 1),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "lstm" => Ok(Family::Lstm),
            "bdlstm" => Ok(Family::BdLstm),
            "edlstm" => Ok(Family::EdLstm),
            "convlstm" => Ok(Family::ConvLstm),
            "linear" => Ok(Family::Linear),
            _ => Err(ModelError::Config(format!("unknown model family `{s}`"))),
        }
    }
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub features: usize,
    pub window: usize,
    pub horizons: usize,
    pub hidden: (usize, usize),
    pub conv_filters: usize,
    pub kernel_size: usize,
    pub quantiles: QuantileSet,
    pub arrangement: Arrangement,
}

impl ModelSpec {
    /// Spec with the family's default hidden sizes, 64 filters of width 2 and
    /// the default quantile set.
    pub fn new(family: Family, features: usize, window: usize, horizons: usize) -> Self {
        Self {
            family,
            features,
            window,
            horizons,
            hidden: family.default_hidden(),
            conv_filters: 64,
            kernel_size: 2,
            quantiles: QuantileSet::default(),
            arrangement: Arrangement::Vector,
        }
    }

    pub fn with_hidden(mut self, h1: usize, h2: usize) -> Self {
        self.hidden = (h1, h2);
        self
    }

    pub fn with_quantiles(mut self, quantiles: QuantileSet) -> Self {
        self.quantiles = quantiles;
        self
    }

    pub fn with_arrangement(mut self, arrangement: Arrangement) -> Self {
        self.arrangement = arrangement;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.features < 1 {
            return bad("features must be >= 1".into());
        }
        if self.window < 1 {
            return bad("window must be >= 1".into());
        }
        if self.horizons < 1 {
            return bad("horizons must be >= 1".into());
        }
        if self.hidden.0 < 1 || self.hidden.1 < 1 {
            return bad(format!("hidden sizes {:?} must be >= 1", self.hidden));
        }
        if self.family == Family::ConvLstm {
            if self.conv_filters < 1 {
                return bad("conv filters must be >= 1".into());
            }
            if self.kernel_size < 1 || self.kernel_size > self.window {
                return bad(format!(
                    "kernel size {} incompatible with window {}",
                    self.kernel_size, self.window
                ));
            }
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        self.horizons * self.quantiles.len()
    }

    /// Length of the convolved sequence (valid padding, stride 1).
    pub fn conv_output_len(&self) -> usize {
        self.window - self.kernel_size + 1
    }

    /// Number of scalar parameters, from the shape table alone.
    pub fn param_count(&self) -> usize {
        let (h1, h2) = self.hidden;
        let (f, d, k) = (self.features, self.window, self.quantiles.len());
        let out = self.outputs();
        let dense = |input: usize, output: usize| input * output + output;
        match self.family {
            Family::Lstm => {
                LstmLayer::param_count(f, h1) + LstmLayer::param_count(h1, h2) + dense(h2, out)
            }
            Family::BdLstm => {
                2 * LstmLayer::param_count(f, h1)
                    + LstmLayer::param_count(2 * h1, h2)
                    + dense(h2, out)
            }
            Family::EdLstm => {
                LstmLayer::param_count(f, h1) + LstmLayer::param_count(h1, h2) + dense(h2, k)
            }
            Family::ConvLstm => {
                let filters = self.conv_filters;
                self.kernel_size * f * filters
                    + filters
                    + LstmLayer::param_count(filters, h1)
                    + dense(h1, out)
            }
            Family::Linear => dense(d * f, out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn build(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, EngineError> {
        let w = params.add(
            format!("{prefix}.w"),
            Tensor::new(&[input, output], Fill::GlorotUniform, rng)?,
        );
        let b = params.add(format!("{prefix}.b"), Tensor::zeros(&[output])?);
        Ok(Self { w, b })
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, EngineError> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layers {
    Lstm {
        first: LstmLayer,
        second: LstmLayer,
        head: Dense,
    },
    BdLstm {
        forward: LstmLayer,
        backward: LstmLayer,
        second: LstmLayer,
        head: Dense,
    },
    EdLstm {
        encoder: LstmLayer,
        decoder: LstmLayer,
        head: Dense,
    },
    ConvLstm {
        kernel: ParamId,
        bias: ParamId,
        lstm: LstmLayer,
        head: Dense,
    },
    Linear {
        head: Dense,
    },
}

/// An instantiated architecture: spec plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    layers: Layers,
}

/// Attach the layer name to non-finite failures.
fn in_layer<T>(layer: &str, r: Result<T, EngineError>) -> Result<T, ModelError> {
    r.map_err(|e| match e {
        EngineError::NonFinite { .. } => ModelError::Numerical {
            layer: layer.to_string(),
        },
        other => ModelError::Engine(other),
    })
}

/// Split `[B, T, C]` into `T` nodes of shape `[B, C]`.
fn time_steps(g: &mut Graph, seq: NodeId) -> Result<Vec<NodeId>, EngineError> {
    let shape = g.shape(seq).to_vec();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    (0..t)
        .map(|i| {
            let s = g.slice(seq, 1, i, 1)?;
            g.reshape(s, &[b, c])
        })
        .collect()
}

/// Stack `[B, C]` nodes into `[B, T, C]`.
fn stack_steps(g: &mut Graph, steps: &[NodeId]) -> Result<NodeId, EngineError> {
    let shape = g.shape(steps[0]).to_vec();
    let expanded = steps
        .iter()
        .map(|&s| g.reshape(s, &[shape[0], 1, shape[1]]))
        .collect::<Result<Vec<_>, _>>()?;
    g.concat(&expanded, 1)
}

pub fn build_model(spec: &ModelSpec, rng: &mut SeededRng) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut params = ParamSet::new();
    let p = &mut params;
    let (h1, h2) = spec.hidden;
    let (f, out, k) = (spec.features, spec.outputs(), spec.quantiles.len());
    let layers = match spec.family {
        Family::Lstm => Layers::Lstm {
            first: LstmLayer::build(p, "lstm1", f, h1, rng)?,
            second: LstmLayer::build(p, "lstm2", h1, h2, rng)?,
            head: Dense::build(p, "head", h2, out, rng)?,
        },
        Family::BdLstm => Layers::BdLstm {
            forward: LstmLayer::build(p, "fwd", f, h1, rng)?,
            backward: LstmLayer::build(p, "bwd", f, h1, rng)?,
            second: LstmLayer::build(p, "lstm2", 2 * h1, h2, rng)?,
            head: Dense::build(p, "head", h2, out, rng)?,
        },
        Family::EdLstm => Layers::EdLstm {
            encoder: LstmLayer::build(p, "encoder", f, h1, rng)?,
            decoder: LstmLayer::build(p, "decoder", h1, h2, rng)?,
            head: Dense::build(p, "head", h2, k, rng)?,
        },
        Family::ConvLstm => {
            let filters = spec.conv_filters;
            let shape: Vec<usize> = if f == 1 {
                vec![spec.kernel_size, 1, filters]
            } else {
                vec![spec.kernel_size, f, 1, filters]
            };
            let kernel = p.add("conv.w", Tensor::new(&shape, Fill::GlorotUniform, rng)?);
            let bias = p.add("conv.b", Tensor::zeros(&[filters])?);
            Layers::ConvLstm {
                kernel,
                bias,
                lstm: LstmLayer::build(p, "lstm", filters, h1, rng)?,
                head: Dense::build(p, "head", h1, out, rng)?,
            }
        }
        Family::Linear => Layers::Linear {
            head: Dense::build(p, "head", spec.window * f, out, rng)?,
        },
    };
    debug_assert_eq!(params.count(), spec.param_count());
    Ok(Model {
        spec: spec.clone(),
        params,
        layers,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 3 || shape[1] != self.spec.window || shape[2] != self.spec.features {
            return Err(ModelError::InputShape {
                got: shape.to_vec(),
                window: self.spec.window,
                features: self.spec.features,
            });
        }
        Ok(())
    }

    /// Record the forward pass on `g` (built with [`Graph::with_params`] over
    /// this model's parameters). Returns `[B, m, K]`.
    pub fn forward(&self, g: &mut Graph, window: NodeId) -> Result<NodeId, ModelError> {
        self.check_input(g.shape(window))?;
        let b = g.shape(window)[0];
        let (m, k) = (self.spec.horizons, self.spec.quantiles.len());
        let flat_head = |g: &mut Graph, head: &Dense, x: NodeId| -> Result<NodeId, ModelError> {
            let y = in_layer("head", head.apply(g, x))?;
            in_layer("head", g.reshape(y, &[b, m, k]))
        };
        match &self.layers {
            Layers::Lstm {
                first,
                second,
                head,
            } => {
                let steps = in_layer("input", time_steps(g, window))?;
                let (seq, _) = in_layer("lstm1", first.unroll(g, &steps, None))?;
                let (_, (h, _)) = in_layer("lstm2", second.unroll(g, &seq, None))?;
                flat_head(g, head, h)
            }
            Layers::BdLstm { second, head, .. } => {
                let seq = self.bidirectional_states(g, window)?;
                let (_, (h, _)) = in_layer("lstm2", second.unroll(g, &seq, None))?;
                flat_head(g, head, h)
            }
            Layers::EdLstm {
                encoder,
                decoder,
                head,
            } => {
                let steps = in_layer("input", time_steps(g, window))?;
                let (_, (h, c)) = in_layer("encoder", encoder.unroll(g, &steps, None))?;
                let init = (encoder.hidden == decoder.hidden).then_some((h, c));
                let repeated = vec![h; m];
                let (outs, _) = in_layer("decoder", decoder.unroll(g, &repeated, init))?;
                let r = (|| {
                    let seq = stack_steps(g, &outs)?;
                    let flat = g.reshape(seq, &[b * m, decoder.hidden])?;
                    let y = head.apply(g, flat)?;
                    g.reshape(y, &[b, m, k])
                })();
                in_layer("head", r)
            }
            Layers::ConvLstm {
                kernel,
                bias,
                lstm,
                head,
            } => {
                let (f, filters) = (self.spec.features, self.spec.conv_filters);
                let len = self.spec.conv_output_len();
                let r = (|| {
                    let w = g.param(*kernel);
                    let conv = if f == 1 {
                        g.conv1d(window, w)?
                    } else {
                        let x = g.reshape(window, &[b, self.spec.window, f, 1])?;
                        let y = g.conv2d(x, w)?;
                        g.reshape(y, &[b, len, filters])?
                    };
                    let bias = g.param(*bias);
                    let conv = g.add(conv, bias)?;
                    let act = g.relu(conv)?;
                    time_steps(g, act)
                })();
                let steps = in_layer("conv", r)?;
                let (_, (h, _)) = in_layer("lstm", lstm.unroll(g, &steps, None))?;
                flat_head(g, head, h)
            }
            Layers::Linear { head } => {
                let flat = in_layer(
                    "input",
                    g.reshape(window, &[b, self.spec.window * self.spec.features]),
                )?;
                flat_head(g, head, flat)
            }
        }
    }

    /// Forward pass in the model's output arrangement: `[B, m, K]`
    /// (vector-based) or `[B, m*K]` horizon-major (grouped).
    pub fn forward_arranged(&self, g: &mut Graph, window: NodeId) -> Result<NodeId, ModelError> {
        let y = self.forward(g, window)?;
        match self.spec.arrangement {
            Arrangement::Vector => Ok(y),
            Arrangement::Grouped => {
                let b = g.shape(y)[0];
                Ok(g.reshape(y, &[b, self.spec.outputs()])?)
            }
        }
    }

    /// Per-step concatenated forward/backward states `[B, 2 H1]` of the
    /// bidirectional layer.
    pub fn bidirectional_states(
        &self,
        g: &mut Graph,
        window: NodeId,
    ) -> Result<Vec<NodeId>, ModelError> {
        let Layers::BdLstm {
            forward, backward, ..
        } = &self.layers
        else {
            return Err(ModelError::Config(format!(
                "{} has no bidirectional layer",
                self.spec.family
            )));
        };
        self.check_input(g.shape(window))?;
        let steps = in_layer("input", time_steps(g, window))?;
        let (fwd, _) = in_layer("fwd", forward.unroll(g, &steps, None))?;
        let reversed = in_layer("input", g.reverse_time(window))?;
        let rev_steps = in_layer("input", time_steps(g, reversed))?;
        let (mut bwd, _) = in_layer("bwd", backward.unroll(g, &rev_steps, None))?;
        bwd.reverse();
        fwd.iter()
            .zip(&bwd)
            .map(|(&a, &b)| in_layer("bdlstm", g.concat(&[a, b], 1)))
            .collect()
    }

    /// Exchange the forward and backward parameter blocks of a BD-LSTM.
    pub fn swap_directions(&mut self) -> Result<(), ModelError> {
        let Layers::BdLstm {
            forward, backward, ..
        } = self.layers
        else {
            return Err(ModelError::Config("not a bidirectional model".into()));
        };
        for (a, b) in [
            (forward.wx, backward.wx),
            (forward.wh, backward.wh),
            (forward.b, backward.b),
        ] {
            let ta = self.params.get(a).clone();
            let tb = std::mem::replace(self.params.get_mut(b), ta);
            *self.params.get_mut(a) = tb;
        }
        Ok(())
    }

    /// Predictions `[B, m, K]` for a window batch `[B, d, f]`.
    pub fn forward_pass(&self, windows: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::with_params(&self.params);
        let x = g.input(windows.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// [`Model::forward_pass`] over large inputs in chunks of `chunk` rows.
    pub fn predict_batched(&self, windows: &Tensor, chunk: usize) -> Result<Tensor, ModelError> {
        let n = windows.shape()[0];
        let mut data = Vec::with_capacity(n * self.spec.outputs());
        for start in (0..n).step_by(chunk.max(1)) {
            let rows: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let part = self.forward_pass(&windows.select_rows(&rows)?)?;
            data.extend_from_slice(part.data());
        }
        Ok(Tensor::from_vec(
            &[n, self.spec.horizons, self.spec.quantiles.len()],
            data,
        )?)
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: ParamSet) -> Result<Self, ModelError> {
        let mut model = build_model(&spec, &mut SeededRng::new(0))?;
        for (id, name, tensor) in model.params.clone().iter() {
            let src = params
                .find(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
            let src = params.get(src);
            if src.shape() != tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            *model.params.get_mut(id) = src.clone();
        }
        if params.len() != model.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests;

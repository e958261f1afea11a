//! Pinball (check) loss and its aggregation over horizons and quantiles.
//!
//! Predictions come in one of two arrangements:
//!
//! * vector-based: `[batch, m, K]`, one quantile vector per horizon;
//! * grouped: `[batch, m * K]`, flat and horizon-major, i.e.
//!   `[h1q1 .. h1qK, h2q1 .. h2qK, ..]`.
//!
//! Both reduce with an unweighted mean over every (sample, horizon, quantile)
//! cell.

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Graph, NodeId, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("quantile level {0} outside (0, 1)")]
    InvalidQuantile(f64),
    #[error("quantile levels must be strictly increasing: {0:?}")]
    UnsortedQuantiles(Vec<f64>),
    #[error("quantile set is empty")]
    EmptyQuantiles,
    #[error("prediction layout {got:?} does not match targets {targets:?} with {quantiles} quantiles")]
    Layout {
        got: Vec<usize>,
        targets: Vec<usize>,
        quantiles: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("quantile set {0:?} has no median (0.5)")]
    MissingMedian(Vec<f64>),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileSet(Vec<f64>);

impl QuantileSet {
    pub const DEFAULT_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

    pub fn new(levels: Vec<f64>) -> Result<Self, LossError> {
        if levels.is_empty() {
            return Err(LossError::EmptyQuantiles);
        }
        if let Some(&q) = levels.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(LossError::InvalidQuantile(q));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LossError::UnsortedQuantiles(levels));
        }
        Ok(Self(levels))
    }

    /// The point-forecast set `{0.5}`.
    pub fn median_only() -> Self {
        Self(vec![0.5])
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of level `q`, compared exactly.
    pub fn index_of(&self, q: f64) -> Option<usize> {
        self.0.iter().position(|&l| l == q)
    }

    pub fn median_index(&self) -> Result<usize, LossError> {
        self.index_of(0.5)
            .ok_or_else(|| LossError::MissingMedian(self.0.clone()))
    }
}

impl Default for QuantileSet {
    fn default() -> Self {
        Self(Self::DEFAULT_LEVELS.to_vec())
    }
}

impl TryFrom<Vec<f64>> for QuantileSet {
    type Error = LossError;

    fn try_from(levels: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(levels)
    }
}

impl From<QuantileSet> for Vec<f64> {
    fn from(q: QuantileSet) -> Self {
        q.0
    }
}

/// Output-layer arrangement of horizon x quantile predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arrangement {
    Grouped,
    #[default]
    Vector,
}

/// Loss for a single observation `y` against prediction `y_hat` at level `q`.
pub fn pinball(y: f64, y_hat: f64, q: f64) -> Result<f64, LossError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(LossError::InvalidQuantile(q));
    }
    Ok(pinball_unchecked(y, y_hat, q))
}

#[inline]
pub(crate) fn pinball_unchecked(y: f64, y_hat: f64, q: f64) -> f64 {
    let u = y - y_hat;
    if u >= 0.0 {
        q * u
    } else {
        (q - 1.0) * u
    }
}

/// Scalar total plus a per-(horizon, quantile) breakdown, each cell averaged
/// over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// `[m, K]`.
    pub breakdown: Tensor,
}

/// Bring predictions in either arrangement to `[batch, m, K]`.
pub fn to_vector_layout(
    targets_shape: &[usize],
    predictions: &Tensor,
    quantiles: usize,
) -> Result<Tensor, LossError> {
    let layout_err = || LossError::Layout {
        got: predictions.shape().to_vec(),
        targets: targets_shape.to_vec(),
        quantiles,
    };
    if targets_shape.len() != 2 {
        return Err(layout_err());
    }
    let (b, m) = (targets_shape[0], targets_shape[1]);
    match predictions.shape() {
        [pb, pm, pk] if *pb == b && *pm == m && *pk == quantiles => Ok(predictions.clone()),
        [pb, flat] if *pb == b && *flat == m * quantiles => {
            Ok(predictions.clone().reshaped(&[b, m, quantiles])?)
        }
        _ => Err(layout_err()),
    }
}

pub fn quantile_loss_batch(
    targets: &Tensor,
    predictions: &Tensor,
    quantiles: &QuantileSet,
) -> Result<LossValue, LossError> {
    let k = quantiles.len();
    let preds = to_vector_layout(targets.shape(), predictions, k)?;
    let (b, m) = (targets.shape()[0], targets.shape()[1]);
    let mut cells = vec![0.0; m * k];
    for i in 0..b {
        for h in 0..m {
            let y = targets.data()[i * m + h];
            for (j, &q) in quantiles.levels().iter().enumerate() {
                cells[h * k + j] += pinball_unchecked(y, preds.data()[(i * m + h) * k + j], q);
            }
        }
    }
    cells.iter_mut().for_each(|c| *c /= b as f64);
    let total = cells.iter().sum::<f64>() / cells.len() as f64;
    Ok(LossValue {
        total,
        breakdown: Tensor::from_vec(&[m, k], cells)?,
    })
}

pub fn mse_loss_batch(targets: &Tensor, predictions: &Tensor) -> Result<f64, LossError> {
    if targets.len() != predictions.len() || targets.is_empty() {
        return Err(LossError::Shape(
            targets.shape().to_vec(),
            predictions.shape().to_vec(),
        ));
    }
    let sum: f64 = targets
        .data()
        .iter()
        .zip(predictions.data())
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(sum / targets.len() as f64)
}

/// The `q = 0.5` slice of `[batch, m, K]` predictions, as `[batch, m]`.
pub fn median_extract(predictions: &Tensor, quantiles: &QuantileSet) -> Result<Tensor, LossError> {
    let idx = quantiles.median_index()?;
    quantile_slice(predictions, quantiles.len(), idx)
}

/// Slice `index` of the trailing quantile axis.
pub fn quantile_slice(predictions: &Tensor, k: usize, index: usize) -> Result<Tensor, LossError> {
    let shape = predictions.shape();
    if shape.len() != 3 || shape[2] != k {
        return Err(LossError::Shape(shape.to_vec(), vec![0, 0, k]));
    }
    let data = predictions
        .data()
        .chunks_exact(k)
        .map(|cell| cell[index])
        .collect();
    Ok(Tensor::from_vec(&shape[..2], data)?)
}

/// Differentiable mean pinball loss. `targets` is `[batch, m]`, `predictions`
/// `[batch, m, K]`.
pub fn quantile_loss_node(
    g: &mut Graph,
    targets: NodeId,
    predictions: NodeId,
    quantiles: &QuantileSet,
) -> Result<NodeId, LossError> {
    let k = quantiles.len();
    let t_shape = g.shape(targets).to_vec();
    let p_shape = g.shape(predictions).to_vec();
    if t_shape.len() != 2 || p_shape != [t_shape[0], t_shape[1], k] {
        return Err(LossError::Layout {
            got: p_shape,
            targets: t_shape,
            quantiles: k,
        });
    }
    let column = g.reshape(targets, &[t_shape[0], t_shape[1], 1])?;
    let replicated = if k == 1 {
        column
    } else {
        g.concat(&vec![column; k], 2)?
    };
    let residual = g.sub(replicated, predictions)?;
    let cells = g.pinball(residual, quantiles.levels())?;
    Ok(g.reduce_mean(cells)?)
}

/// Differentiable mean squared error between equally shaped nodes.
pub fn mse_node(g: &mut Graph, targets: NodeId, predictions: NodeId) -> Result<NodeId, LossError> {
    let (ts, ps) = (g.shape(targets).to_vec(), g.shape(predictions).to_vec());
    let predictions = if ts != ps && ts.iter().product::<usize>() == ps.iter().product::<usize>() {
        g.reshape(predictions, &ts)?
    } else {
        predictions
    };
    let diff = g.sub(targets, predictions)?;
    let sq = g.hadamard(diff, diff)?;
    Ok(g.reduce_mean(sq)?)
}

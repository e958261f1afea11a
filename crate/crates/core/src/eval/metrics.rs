use super::EvalError;
use crate::engine::Tensor;
use crate::loss::QuantileSet;

/// Root mean squared error per horizon and its mean over horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmse {
    pub per_horizon: Vec<f64>,
    pub mean: f64,
}

fn dims(targets: &Tensor) -> Result<(usize, usize), EvalError> {
    match targets.shape() {
        [n, m] if *n > 0 && *m > 0 => Ok((*n, *m)),
        _ if targets.is_empty() => Err(EvalError::EmptyEval),
        other => Err(EvalError::Shape(format!("targets must be [n, m], got {other:?}"))),
    }
}

fn check_predictions(targets: &Tensor, predictions: &Tensor, k: usize) -> Result<(usize, usize), EvalError> {
    let (n, m) = dims(targets)?;
    if predictions.len() != n * m * k || predictions.shape()[0] != n {
        return Err(EvalError::Shape(format!(
            "predictions {:?} do not match targets {:?} with {k} quantiles",
            predictions.shape(),
            targets.shape()
        )));
    }
    Ok((n, m))
}

/// `targets [n, m]` against `predictions` of `n * m` values (`[n, m]` or
/// `[n, m, 1]`).
pub fn rmse(targets: &Tensor, predictions: &Tensor) -> Result<Rmse, EvalError> {
    let (n, m) = check_predictions(targets, predictions, 1)?;
    Ok(rmse_strided(targets.data(), predictions.data(), n, m, 1, 0))
}

/// RMSE of quantile slice `k` out of `kk` interleaved predictions.
fn rmse_strided(y: &[f64], p: &[f64], n: usize, m: usize, kk: usize, k: usize) -> Rmse {
    let mut sq = vec![0.0; m];
    for i in 0..n {
        for h in 0..m {
            let e = y[i * m + h] - p[(i * m + h) * kk + k];
            sq[h] += e * e;
        }
    }
    let per_horizon: Vec<f64> = sq.iter().map(|s| (s / n as f64).sqrt()).collect();
    let mean = per_horizon.iter().sum::<f64>() / m as f64;
    Rmse { per_horizon, mean }
}

/// Per-horizon RMSE of every quantile slice of `[n, m, K]` predictions.
pub fn quantile_rmse_table(
    targets: &Tensor,
    predictions: &Tensor,
    quantiles: &QuantileSet,
) -> Result<Vec<Rmse>, EvalError> {
    let k = quantiles.len();
    let (n, m) = check_predictions(targets, predictions, k)?;
    Ok((0..k)
        .map(|j| rmse_strided(targets.data(), predictions.data(), n, m, k, j))
        .collect())
}

/// Mean-over-horizons RMSE of each quantile slice.
pub fn quantile_rmse(
    targets: &Tensor,
    predictions: &Tensor,
    quantiles: &QuantileSet,
) -> Result<Vec<f64>, EvalError> {
    if quantiles.index_of(0.5).is_none() {
        return Err(EvalError::MissingQuantile(0.5));
    }
    Ok(quantile_rmse_table(targets, predictions, quantiles)?
        .into_iter()
        .map(|r| r.mean)
        .collect())
}

/// Fraction of target cells inside `[prediction at lo, prediction at hi]`.
pub fn coverage(
    targets: &Tensor,
    predictions: &Tensor,
    quantiles: &QuantileSet,
    lo: f64,
    hi: f64,
) -> Result<f64, EvalError> {
    let a = quantiles.index_of(lo).ok_or(EvalError::MissingQuantile(lo))?;
    let b = quantiles.index_of(hi).ok_or(EvalError::MissingQuantile(hi))?;
    if lo >= hi {
        return Err(EvalError::Shape(format!("band [{lo}, {hi}] is empty")));
    }
    let k = quantiles.len();
    let (n, m) = check_predictions(targets, predictions, k)?;
    let p = predictions.data();
    let inside = targets
        .data()
        .iter()
        .enumerate()
        .filter(|&(c, &y)| p[c * k + a] <= y && y <= p[c * k + b])
        .count();
    Ok(inside as f64 / (n * m) as f64)
}

/// Fraction of `(window, horizon)` cells where some lower level's prediction
/// exceeds the next level's.
pub fn crossing_rate(predictions: &Tensor, quantiles: &QuantileSet) -> Result<f64, EvalError> {
    let k = quantiles.len();
    if predictions.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    if k < 2 {
        return Ok(0.0);
    }
    if predictions.len() % k != 0 {
        return Err(EvalError::Shape(format!(
            "{} predictions are not a multiple of {k} quantiles",
            predictions.len()
        )));
    }
    let cells = predictions.len() / k;
    let crossed = predictions
        .data()
        .chunks(k)
        .filter(|row| row.windows(2).any(|w| w[0] > w[1]))
        .count();
    Ok(crossed as f64 / cells as f64)
}

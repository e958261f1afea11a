//! Linear multi-output baselines: closed-form least squares and quantile
//! linear regression fitted by full-batch subgradient descent on the
//! pinball objective.
//!
//! Both produce a [`LinearModel`], which wraps a `linear`-family [`Model`] so
//! prediction and checkpoints follow the deep models exactly. Coefficients
//! are `head.w [d f, m K]` with columns ordered horizon-major.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::WindowedDataset;
use crate::engine::{EngineError, Graph, ParamSet, Tensor};
use crate::loss::{quantile_loss_node, LossError, QuantileSet};
use crate::models::{Family, Model, ModelError, ModelSpec};

const RIDGE: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum LinearError {
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("quantile fit diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },
    #[error("design has {rows} rows but targets have {targets}")]
    Shape { rows: usize, targets: usize },
    #[error("model is a {0} model, not linear")]
    NotLinear(Family),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    model: Model,
}

impl LinearModel {
    pub fn from_model(model: Model) -> Result<Self, LinearError> {
        match model.spec().family {
            Family::Linear => Ok(Self { model }),
            other => Err(LinearError::NotLinear(other)),
        }
    }

    /// Builds a model from a `[d f, m K]` coefficient matrix and `m K`
    /// intercepts.
    pub fn from_coefficients(
        spec: ModelSpec,
        coef: Vec<f64>,
        intercept: Vec<f64>,
    ) -> Result<Self, LinearError> {
        let p = spec.window * spec.features;
        let out = spec.outputs();
        let mut params = ParamSet::new();
        params.add("head.w", Tensor::from_vec(&[p, out], coef)?);
        params.add("head.b", Tensor::from_vec(&[out], intercept)?);
        Self::from_model(Model::from_parts(spec, params)?)
    }

    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }

    pub fn quantiles(&self) -> &QuantileSet {
        &self.model.spec().quantiles
    }

    pub fn coef(&self) -> &Tensor {
        let id = self.model.params().find("head.w").expect("linear head");
        self.model.params().get(id)
    }

    pub fn intercept(&self) -> &Tensor {
        let id = self.model.params().find("head.b").expect("linear head");
        self.model.params().get(id)
    }

    /// Coefficient of flattened input `i` for horizon `h`, quantile `k`.
    pub fn coef_at(&self, i: usize, h: usize, k: usize) -> f64 {
        self.coef().at(&[i, h * self.quantiles().len() + k])
    }

    /// `[B, m, K]` predictions for windows `[B, d, f]`.
    pub fn predict(&self, windows: &Tensor) -> Result<Tensor, LinearError> {
        Ok(self.model.forward_pass(windows)?)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn save(&self, path: &Path) -> Result<(), LinearError> {
        Ok(self.model.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, LinearError> {
        Self::from_model(Model::load(path)?)
    }
}

fn design(windows: &Tensor, targets: &Tensor) -> Result<(usize, usize, usize), LinearError> {
    let (n, m) = (targets.shape()[0], targets.shape()[1]);
    if windows.shape()[0] != n {
        return Err(LinearError::Shape {
            rows: windows.shape()[0],
            targets: n,
        });
    }
    Ok((n, windows.len() / n, m))
}

fn column_means(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut mean = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= rows as f64);
    mean
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlsOptions {
    pub ridge_fallback: bool,
}

impl Default for OlsOptions {
    fn default() -> Self {
        Self {
            ridge_fallback: true,
        }
    }
}

/// Least squares on the training windows of a normalized dataset.
pub fn fit_ols(ds: &WindowedDataset) -> Result<LinearModel, LinearError> {
    let ids = ds.train_indices();
    fit_ols_arrays(&ds.inputs(ids), &ds.targets(ids), OlsOptions::default())
}

/// Least squares of `targets [n, m]` on flattened `windows [n, d, f]`, one
/// column per horizon, via centred normal equations.
pub fn fit_ols_arrays(
    windows: &Tensor,
    targets: &Tensor,
    opts: OlsOptions,
) -> Result<LinearModel, LinearError> {
    let (n, p, m) = design(windows, targets)?;
    let x_mean = column_means(windows.data(), n, p);
    let y_mean = column_means(targets.data(), n, m);
    let xc = DMatrix::from_fn(n, p, |r, c| windows.data()[r * p + c] - x_mean[c]);
    let yc = DMatrix::from_fn(n, m, |r, c| targets.data()[r * m + c] - y_mean[c]);
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * &yc;

    let beta = match solve_spd(&gram, &rhs) {
        Some(beta) => beta,
        None if opts.ridge_fallback => {
            let scale = (gram.trace() / p as f64).max(1.0);
            log::warn!("normal equations are singular; adding ridge {RIDGE:e}");
            let ridged = &gram + DMatrix::identity(p, p) * (RIDGE * scale);
            solve_spd(&ridged, &rhs).ok_or(LinearError::SingularSystem)?
        }
        None => return Err(LinearError::SingularSystem),
    };
    let intercept: Vec<f64> = (0..m)
        .map(|h| y_mean[h] - (0..p).map(|i| x_mean[i] * beta[(i, h)]).sum::<f64>())
        .collect();
    let coef: Vec<f64> = (0..p).flat_map(|i| (0..m).map(move |h| (i, h))).map(|ih| beta[ih]).collect();

    let d = windows.shape()[1];
    let f = windows.shape()[2];
    let spec = ModelSpec::new(Family::Linear, f, d, m).with_quantiles(QuantileSet::median_only());
    LinearModel::from_coefficients(spec, coef, intercept)
}

/// Cholesky solve that treats a collapsing pivot as singular.
fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let diag: DVector<f64> = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v * v), hi.max(v * v)));
    if !(lo > 1e-13 * hi) {
        return None;
    }
    Some(chol.solve(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileFitOptions {
    pub iterations: usize,
    /// Initial step; iteration `t` uses `step / (1 + t / 100)`.
    pub step: f64,
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for QuantileFitOptions {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            step: 0.5,
            tolerance: 1e-9,
            patience: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub model: LinearModel,
    /// Best mean pinball loss seen up to each iteration; non-increasing.
    pub trace: Vec<f64>,
}

pub fn fit_quantile_linear(
    ds: &WindowedDataset,
    quantiles: &QuantileSet,
    opts: QuantileFitOptions,
) -> Result<QuantileFit, LinearError> {
    let ids = ds.train_indices();
    fit_quantile_arrays(&ds.inputs(ids), &ds.targets(ids), quantiles, opts)
}

/// Pinball regression of `targets [n, m]` on flattened `windows [n, d, f]`.
///
/// Inputs and targets are standardized before descent and the solution is
/// mapped back; constant input columns get zero coefficients.
pub fn fit_quantile_arrays(
    windows: &Tensor,
    targets: &Tensor,
    quantiles: &QuantileSet,
    opts: QuantileFitOptions,
) -> Result<QuantileFit, LinearError> {
    let (n, p, m) = design(windows, targets)?;
    let k = quantiles.len();
    let (x_mean, x_scale) = standardize_columns(windows.data(), n, p);
    let all_y = targets.data();
    let y_mean = all_y.iter().sum::<f64>() / all_y.len() as f64;
    let y_scale = spread(all_y.iter().map(|v| v - y_mean));

    let z: Vec<f64> = windows
        .data()
        .chunks(p)
        .flat_map(|row| (0..p).map(|c| (row[c] - x_mean[c]) / x_scale[c]).collect::<Vec<_>>())
        .collect();
    let z = Tensor::from_vec(&[n, p], z)?;
    let yz = targets.map(|v| (v - y_mean) / y_scale);

    let (wz, bz, trace) = descend(&z, &yz, quantiles, opts)?;

    let mut coef = vec![0.0; p * m * k];
    let mut intercept = vec![0.0; m * k];
    for j in 0..m * k {
        let mut shift = 0.0;
        for i in 0..p {
            let w = wz[i * m * k + j] / x_scale[i];
            coef[i * m * k + j] = w * y_scale;
            shift += w * x_mean[i];
        }
        intercept[j] = (bz[j] - shift) * y_scale + y_mean;
    }
    let spec = ModelSpec::new(Family::Linear, windows.shape()[2], windows.shape()[1], m)
        .with_quantiles(quantiles.clone());
    Ok(QuantileFit {
        model: LinearModel::from_coefficients(spec, coef, intercept)?,
        trace: trace.into_iter().map(|v| v * y_scale).collect(),
    })
}

/// Intercept-only pinball fit of a sample at one quantile level. Returns the
/// fitted constant and the objective trace.
pub fn fit_quantile_intercept(
    sample: &[f64],
    q: f64,
    opts: QuantileFitOptions,
) -> Result<(f64, Vec<f64>), LinearError> {
    let quantiles = QuantileSet::new(vec![q])?;
    let n = sample.len();
    let mean = sample.iter().sum::<f64>() / n as f64;
    let scale = spread(sample.iter().map(|v| v - mean));
    let yz = Tensor::from_vec(&[n, 1], sample.iter().map(|v| (v - mean) / scale).collect())?;
    let (_, bz, trace) = descend(&Tensor::zeros(&[n, 1])?, &yz, &quantiles, opts)?;
    Ok((
        bz[0] * scale + mean,
        trace.into_iter().map(|v| v * scale).collect(),
    ))
}

fn spread(centred: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = centred.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    let sd = (sum / count.max(1) as f64).sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

fn standardize_columns(data: &[f64], n: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = column_means(data, n, p);
    let scale = (0..p)
        .map(|c| spread(data.chunks(p).map(|row| row[c] - mean[c])))
        .collect();
    (mean, scale)
}

/// Subgradient descent on `z [n, p]`, `y [n, m]`, returning the best
/// weights `[p, mK]`, biases `[mK]` and the best-so-far trace.
fn descend(
    z: &Tensor,
    y: &Tensor,
    quantiles: &QuantileSet,
    opts: QuantileFitOptions,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), LinearError> {
    let (n, p) = (z.shape()[0], z.shape()[1]);
    let m = y.shape()[1];
    let k = quantiles.len();
    let mut params = ParamSet::new();
    let w = params.add("w", Tensor::zeros(&[p, m * k])?);
    let b = params.add("b", Tensor::zeros(&[m * k])?);

    let mut best = (params.clone(), f64::INFINITY);
    let mut trace = Vec::new();
    for t in 0..opts.iterations {
        let mut g = Graph::with_params(&params);
        let zn = g.input(z.clone());
        let yn = g.input(y.clone());
        let (wn, bn) = (g.param(w), g.param(b));
        let lin = g.matmul(zn, wn)?;
        let out = g.add(lin, bn)?;
        let pred = g.reshape(out, &[n, m, k])?;
        let loss = quantile_loss_node(&mut g, yn, pred, quantiles);
        let value = loss
            .as_ref()
            .ok()
            .map(|&l| g.value(l).item())
            .filter(|v| v.is_finite());
        let Some(value) = value else {
            return Err(LinearError::TrainingDiverged { iteration: t });
        };
        if value < best.1 {
            best = (params.clone(), value);
        }
        trace.push(best.1);
        if t >= opts.patience && trace[t - opts.patience] - best.1 < opts.tolerance {
            break;
        }

        let grads = g.backward(loss?)?;
        let rate = opts.step / (1.0 + t as f64 / 100.0);
        for id in [w, b] {
            let grad = grads.get(id).data().to_vec();
            for (v, gv) in params.get_mut(id).data_mut().iter_mut().zip(grad) {
                *v -= rate * gv;
            }
        }
    }
    let (params, _) = best;
    Ok((
        params.get(w).data().to_vec(),
        params.get(b).data().to_vec(),
        trace,
    ))
}

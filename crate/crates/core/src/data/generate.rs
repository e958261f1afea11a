use serde::{Deserialize, Serialize};

use super::{DataError, RawSeries, TimeIndex};
use crate::engine::rng::{streams, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MackeyGlassParams {
    pub a: f64,
    pub b: f64,
    /// Delay in integration steps.
    pub delay: usize,
    pub exponent: f64,
    /// Constant pre-history before jitter.
    pub history: f64,
    pub jitter: f64,
    pub steps: usize,
}

impl Default for MackeyGlassParams {
    fn default() -> Self {
        Self {
            a: 0.2,
            b: 0.1,
            delay: 10,
            exponent: 10.0,
            history: 1.2,
            jitter: 0.01,
            steps: 3000,
        }
    }
}

/// RK4 with unit step over the delay grid. The delayed value at a half step
/// is the mean of its grid neighbours.
pub fn gen_mackey_glass(p: &MackeyGlassParams, seed: u64) -> Result<RawSeries, DataError> {
    if p.delay < 1 {
        return Err(DataError::InvalidParams("delay must be at least 1".into()));
    }
    if p.steps < p.delay + 2 {
        return Err(DataError::InvalidParams(format!(
            "{} steps is shorter than delay + 2",
            p.steps
        )));
    }
    let mut rng = SeededRng::new(seed).split(streams::DATA);
    let mut buf: Vec<f64> = (0..=p.delay)
        .map(|_| p.history + rng.uniform_range(-p.jitter, p.jitter))
        .collect();
    buf.reserve(p.steps);

    let rate = |x: f64, lagged: f64| p.a * lagged / (1.0 + lagged.powf(p.exponent)) - p.b * x;
    for k in p.delay..p.delay + p.steps - 1 {
        let x = buf[k];
        let d0 = buf[k - p.delay];
        let d1 = buf[k - p.delay + 1];
        let dm = 0.5 * (d0 + d1);
        let k1 = rate(x, d0);
        let k2 = rate(x + 0.5 * k1, dm);
        let k3 = rate(x + 0.5 * k2, dm);
        let k4 = rate(x + k3, d1);
        buf.push(x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0);
    }
    Ok(RawSeries::univariate(
        "mackey-glass",
        "Value",
        buf[p.delay..].to_vec(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzParams {
    pub rho: f64,
    pub sigma: f64,
    pub beta: f64,
    pub dt: f64,
    pub steps: usize,
    pub initial: [f64; 3],
    /// 0, 1 or 2 for x, y, z.
    pub component: usize,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            rho: 28.0,
            sigma: 10.0,
            beta: 2.667,
            dt: 0.01,
            steps: 10_000,
            initial: [0.0, 1.0, 1.05],
            component: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LorenzSeries {
    pub component: RawSeries,
    pub full: RawSeries,
}

/// Fixed-step RK4. The first sample is the initial state.
pub fn gen_lorenz(p: &LorenzParams) -> Result<LorenzSeries, DataError> {
    if p.steps < 2 {
        return Err(DataError::InvalidParams("need at least 2 steps".into()));
    }
    if p.component > 2 {
        return Err(DataError::InvalidParams(format!(
            "component {} is not one of 0, 1, 2",
            p.component
        )));
    }
    if !(p.dt > 0.0 && p.dt.is_finite()) {
        return Err(DataError::InvalidParams("dt must be positive".into()));
    }
    let deriv = |s: [f64; 3]| {
        [
            p.sigma * (s[1] - s[0]),
            s[0] * (p.rho - s[2]) - s[1],
            s[0] * s[1] - p.beta * s[2],
        ]
    };
    let axpy = |s: [f64; 3], k: [f64; 3], h: f64| [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2]];

    let h = p.dt;
    let mut state = p.initial;
    let mut values = Vec::with_capacity(3 * p.steps);
    values.extend_from_slice(&state);
    for _ in 1..p.steps {
        let k1 = deriv(state);
        let k2 = deriv(axpy(state, k1, 0.5 * h));
        let k3 = deriv(axpy(state, k2, 0.5 * h));
        let k4 = deriv(axpy(state, k3, h));
        for i in 0..3 {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        values.extend_from_slice(&state);
    }
    let full = RawSeries::new(
        "lorenz",
        vec!["x".into(), "y".into(), "z".into()],
        values,
        TimeIndex::Steps,
    )?;
    let mut component = full.select(&[p.component]);
    component.name = format!("lorenz-{}", full.columns()[p.component]);
    Ok(LorenzSeries { component, full })
}

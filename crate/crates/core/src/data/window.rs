use serde::{Deserialize, Serialize};

use super::{DataError, RawSeries};
use crate::engine::rng::{streams, SeededRng};
use crate::engine::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    columns: Vec<String>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits per-column ranges over the given rows of a row-major matrix.
    pub fn fit(
        columns: &[String],
        values: &[f64],
        rows: impl IntoIterator<Item = usize>,
    ) -> Result<Self, DataError> {
        let f = columns.len();
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        for t in rows {
            for (j, &v) in values[t * f..(t + 1) * f].iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        for j in 0..f {
            if !(max[j] > min[j]) {
                return Err(DataError::DegenerateFeature(columns[j].clone()));
            }
        }
        Ok(Self {
            columns: columns.to_vec(),
            min,
            max,
        })
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn apply(&self, column: usize, x: f64) -> f64 {
        (x - self.min[column]) / (self.max[column] - self.min[column])
    }

    pub fn invert(&self, column: usize, x: f64) -> f64 {
        x * (self.max[column] - self.min[column]) + self.min[column]
    }

    fn transform(&self, values: &mut [f64]) {
        let f = self.columns.len();
        for row in values.chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.apply(j, *v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeScope {
    /// Fit on every observation, then split.
    #[default]
    WholeSeries,
    /// Fit only on observations touched by training windows.
    TrainOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle of `0..n` cut at `round(0.8 n)`. Both halves are
    /// returned in ascending order.
    pub fn shuffled(n: usize, seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..n).collect();
        SeededRng::new(seed).split(streams::SPLIT).shuffle(&mut ids);
        let cut = (0.8 * n as f64).round() as usize;
        let mut train = ids[..cut].to_vec();
        let mut test = ids[cut..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self { seed, train, test }
    }
}

/// Sliding windows over a series: window `i` reads rows `i..i+d` as input and
/// the target column at rows `i+d..i+d+m` as output.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    name: String,
    columns: Vec<String>,
    values: Vec<f64>,
    window: usize,
    horizons: usize,
    target: usize,
    scaler: Option<MinMaxScaler>,
    split: Option<Split>,
}

pub fn make_windows(
    series: &RawSeries,
    window: usize,
    horizons: usize,
    target: &str,
) -> Result<WindowedDataset, DataError> {
    let target = series
        .column_index(target)
        .ok_or_else(|| DataError::Schema(vec![target.to_string()]))?;
    if window == 0 || horizons == 0 || series.len() <= window + horizons {
        return Err(DataError::InsufficientData {
            len: series.len(),
            window,
            horizons,
        });
    }
    Ok(WindowedDataset {
        name: series.name.clone(),
        columns: series.columns().to_vec(),
        values: series.values().to_vec(),
        window,
        horizons,
        target,
        scaler: None,
        split: None,
    })
}

impl WindowedDataset {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of windows, `T - d - m + 1`.
    pub fn len(&self) -> usize {
        self.series_len() + 1 - self.window - self.horizons
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn series_len(&self) -> usize {
        self.values.len() / self.features()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn horizons(&self) -> usize {
        self.horizons
    }

    pub fn features(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn target_column(&self) -> usize {
        self.target
    }

    /// Series values, scaled once normalized.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaler(&self) -> Option<&MinMaxScaler> {
        self.scaler.as_ref()
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    pub fn train_indices(&self) -> &[usize] {
        self.split.as_ref().map_or(&[], |s| &s.train)
    }

    pub fn test_indices(&self) -> &[usize] {
        self.split.as_ref().map_or(&[], |s| &s.test)
    }

    /// Row-major `d x f` input of window `i`.
    pub fn input(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.values[i * f..(i + self.window) * f]
    }

    pub fn target(&self, i: usize) -> Vec<f64> {
        let f = self.features();
        (i + self.window..i + self.window + self.horizons)
            .map(|t| self.values[t * f + self.target])
            .collect()
    }

    /// Stacked inputs `[n, d, f]`. `ids` must be non-empty.
    pub fn inputs(&self, ids: &[usize]) -> Tensor {
        let data = ids.iter().flat_map(|&i| self.input(i).to_vec()).collect();
        Tensor::from_vec(&[ids.len(), self.window, self.features()], data)
            .expect("at least one window id")
    }

    /// Stacked targets `[n, m]`. `ids` must be non-empty.
    pub fn targets(&self, ids: &[usize]) -> Tensor {
        let data = ids.iter().flat_map(|&i| self.target(i)).collect();
        Tensor::from_vec(&[ids.len(), self.horizons], data).expect("at least one window id")
    }

    /// Maps a scaled target value back to the original units.
    pub fn denormalize_target(&self, x: f64) -> f64 {
        match &self.scaler {
            Some(s) => s.invert(self.target, x),
            None => x,
        }
    }

    pub fn normalize_and_split(self, seed: u64) -> Result<Self, DataError> {
        self.normalize_and_split_with(seed, NormalizeScope::WholeSeries)
    }

    pub fn normalize_and_split_with(
        mut self,
        seed: u64,
        scope: NormalizeScope,
    ) -> Result<Self, DataError> {
        if self.scaler.is_some() {
            return Err(DataError::InvalidParams("dataset is already normalized".into()));
        }
        let split = Split::shuffled(self.len(), seed);
        let scaler = match scope {
            NormalizeScope::WholeSeries => {
                MinMaxScaler::fit(&self.columns, &self.values, 0..self.series_len())?
            }
            NormalizeScope::TrainOnly => {
                let mut touched = vec![false; self.series_len()];
                for &i in &split.train {
                    touched[i..i + self.window + self.horizons].fill(true);
                }
                let rows = touched.iter().enumerate().filter(|(_, &t)| t).map(|(t, _)| t);
                MinMaxScaler::fit(&self.columns, &self.values, rows)?
            }
        };
        scaler.transform(&mut self.values);
        self.scaler = Some(scaler);
        self.split = Some(split);
        Ok(self)
    }
}

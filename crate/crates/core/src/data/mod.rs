//! Series acquisition, sliding windows, scaling and the train/test split.

mod generate;
mod ingest;
mod window;


use chrono::NaiveDate;

pub use generate::{gen_lorenz, gen_mackey_glass, LorenzParams, LorenzSeries, MackeyGlassParams};
pub use ingest::{load_csv, write_csv, Schema};
pub use window::{make_windows, MinMaxScaler, NormalizeScope, Split, WindowedDataset};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing columns: {}", .0.join(", "))]
    Schema(Vec<String>),
    #[error("row {row}: cannot parse {column} value `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("series of length {len} is too short for window {window} and horizon {horizons}")]
    InsufficientData {
        len: usize,
        window: usize,
        horizons: usize,
    },
    #[error("feature `{0}` is constant and cannot be min-max scaled")]
    DegenerateFeature(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TimeIndex {
    /// Integer time steps `0..len` of a generated series.
    Steps,
    Dates(Vec<NaiveDate>),
}

/// `T` observations of `f` named features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub name: String,
    columns: Vec<String>,
    values: Vec<f64>,
    index: TimeIndex,
}

impl RawSeries {
    pub fn new(
        name: impl Into<String>,
        columns: Vec<String>,
        values: Vec<f64>,
        index: TimeIndex,
    ) -> Result<Self, DataError> {
        let f = columns.len();
        if f == 0 || values.len() % f != 0 {
            return Err(DataError::InvalidParams(format!(
                "{} values do not fill {f} columns",
                values.len()
            )));
        }
        if let TimeIndex::Dates(d) = &index {
            if d.len() * f != values.len() {
                return Err(DataError::InvalidParams("date index length mismatch".into()));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Parse {
                row: pos / f + 1,
                column: columns[pos % f].clone(),
                value: values[pos].to_string(),
            });
        }
        Ok(Self {
            name: name.into(),
            columns,
            values,
            index,
        })
    }

    pub fn univariate(name: impl Into<String>, column: &str, values: Vec<f64>) -> Self {
        Self::new(name, vec![column.to_string()], values, TimeIndex::Steps)
            .expect("single column always fits")
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn features(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self) -> &TimeIndex {
        &self.index
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values
            .chunks(self.features())
            .map(|row| row[j])
            .collect()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let f = self.features();
        &self.values[t * f..(t + 1) * f]
    }

    /// Keeps only the given columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Self {
        let values = self
            .values
            .chunks(self.features())
            .flat_map(|row| columns.iter().map(move |&j| row[j]))
            .collect();
        Self {
            name: self.name.clone(),
            columns: columns.iter().map(|&j| self.columns[j].clone()).collect(),
            values,
            index: self.index.clone(),
        }
    }

    /// First `n` observations.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let index = match &self.index {
            TimeIndex::Steps => TimeIndex::Steps,
            TimeIndex::Dates(d) => TimeIndex::Dates(d[..n].to_vec()),
        };
        Self {
            name: self.name.clone(),
            columns: self.columns.clone(),
            values: self.values[..n * self.features()].to_vec(),
            index,
        }
    }

    /// Every `stride`-th observation starting at 0.
    pub fn downsample(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let rows: Vec<usize> = (0..self.len()).step_by(stride).collect();
        let index = match &self.index {
            TimeIndex::Steps => TimeIndex::Steps,
            TimeIndex::Dates(d) => TimeIndex::Dates(rows.iter().map(|&t| d[t]).collect()),
        };
        Self {
            name: self.name.clone(),
            columns: self.columns.clone(),
            values: rows.iter().flat_map(|&t| self.row(t).to_vec()).collect(),
            index,
        }
    }
}

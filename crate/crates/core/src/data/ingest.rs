use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DataError, RawSeries, TimeIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// Date plus High, Low, Open, Close, Volume.
    Crypto,
    /// Date (or Step) plus Value.
    Univariate,
}

impl Schema {
    pub fn features(self) -> &'static [&'static str] {
        match self {
            Schema::Crypto => &["High", "Low", "Open", "Close", "Volume"],
            Schema::Univariate => &["Value"],
        }
    }

    /// Column predicted by the models.
    pub fn target(self) -> &'static str {
        match self {
            Schema::Crypto => "Close",
            Schema::Univariate => "Value",
        }
    }
}

const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d", "%d/%m/%Y", "%Y/%m/%d"];

fn parse_date(raw: &str) -> Option<NaiveDate> {
    // datetime stamps such as "2013-04-29 23:59:59" keep only the day
    let day = raw.split(['T', ' ']).next()?;
    DATE_FORMATS
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(day, fmt).ok())
}

/// Reads a CSV, keeping only the schema's feature columns, sorted by date.
///
/// Column names match case-insensitively; any other columns are dropped.
/// Row numbers in errors count the header as row 1.
pub fn load_csv(path: &Path, schema: Schema) -> Result<RawSeries, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));

    let date_col = find("Date");
    let step_col = find("Step");
    let mut missing = Vec::new();
    let allow_steps = schema == Schema::Univariate && step_col.is_some();
    if date_col.is_none() && !allow_steps {
        missing.push("Date".to_string());
    }
    let feature_cols: Vec<Option<usize>> = schema.features().iter().map(|c| find(c)).collect();
    for (name, col) in schema.features().iter().zip(&feature_cols) {
        if col.is_none() {
            missing.push(name.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(DataError::Schema(missing));
    }
    let feature_cols: Vec<usize> = feature_cols.into_iter().flatten().collect();

    let mut rows: Vec<(Option<NaiveDate>, Vec<f64>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let cell = |j: usize| record.get(j).unwrap_or("");
        let date = match date_col {
            Some(j) => Some(parse_date(cell(j)).ok_or_else(|| DataError::Parse {
                row,
                column: headers[j].to_string(),
                value: cell(j).to_string(),
            })?),
            None => None,
        };
        let values = feature_cols
            .iter()
            .map(|&j| {
                cell(j)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Parse {
                        row,
                        column: headers[j].to_string(),
                        value: cell(j).to_string(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((date, values));
    }

    let index = if date_col.is_some() {
        rows.sort_by_key(|(d, _)| *d);
        TimeIndex::Dates(rows.iter().filter_map(|(d, _)| *d).collect())
    } else {
        TimeIndex::Steps
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let columns = schema.features().iter().map(|c| c.to_string()).collect();
    RawSeries::new(
        name,
        columns,
        rows.into_iter().flat_map(|(_, v)| v).collect(),
        index,
    )
}

/// Writes a series with a leading Date or Step column. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_csv(series: &RawSeries, path: &Path) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let time_header = match series.index() {
        TimeIndex::Steps => "Step",
        TimeIndex::Dates(_) => "Date",
    };
    writeln!(out, "{time_header},{}", series.columns().join(","))?;
    for t in 0..series.len() {
        match series.index() {
            TimeIndex::Steps => write!(out, "{t}")?,
            TimeIndex::Dates(d) => write!(out, "{}", d[t].format("%Y-%m-%d"))?,
        }
        for v in series.row(t) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

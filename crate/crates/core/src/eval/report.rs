use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvalError, Strategy};
use crate::models::Family;

/// Metrics of one trained model on its test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub quantiles: Vec<f64>,
    /// Median-quantile RMSE at each horizon.
    pub horizon_rmse: Vec<f64>,
    /// Mean-over-horizons RMSE of each quantile slice.
    pub quantile_rmse: Vec<f64>,
    /// Mean of `horizon_rmse`.
    pub mean_rmse: f64,
    /// Share of targets inside the outermost quantile band.
    pub coverage: Option<f64>,
    pub crossing_rate: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    MeanRmse,
    Rmse,
    QuantileRmse,
    Coverage,
    CrossingRate,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::MeanRmse => "mean-rmse",
            Metric::Rmse => "rmse",
            Metric::QuantileRmse => "quantile-rmse",
            Metric::Coverage => "coverage",
            Metric::CrossingRate => "crossing-rate",
        }
    }
}

/// Mean and 95% half-width of one metric cell over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub metric: Metric,
    /// Horizon step (`1..=m`), quantile level, or `all`.
    pub key: String,
    pub mean: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub family: Family,
    pub strategy: Strategy,
    pub quantile: bool,
    pub quantiles: Vec<f64>,
    pub horizons: usize,
    pub runs: usize,
    pub requested: usize,
    pub config_hash: String,
    pub cells: Vec<Cell>,
    pub warnings: Vec<String>,
}

/// Sample mean and `1.96 s / sqrt(R)`; the half-width is 0 when `R < 2`.
pub fn mean_and_half_width(values: &[f64]) -> (f64, f64) {
    let r = values.len();
    if r == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    if r < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1) as f64;
    (mean, 1.96 * var.sqrt() / (r as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub family: Family,
    pub strategy: Strategy,
    pub quantile: bool,
    pub quantiles: Vec<f64>,
    pub horizons: usize,
    pub requested: usize,
    pub config_hash: String,
}

impl AggregateReport {
    pub fn from_runs(meta: ReportMeta, runs: &[RunReport]) -> Self {
        let mut cells = Vec::new();
        let mut warnings = Vec::new();
        if runs.len() == 1 {
            warnings.push("single run: confidence half-widths reported as 0".to_string());
            log::warn!("{}", warnings[0]);
        }
        if runs.len() < meta.requested {
            warnings.push(format!(
                "{} of {} runs completed",
                runs.len(),
                meta.requested
            ));
        }
        let mut push = |metric, key: String, values: Vec<f64>| {
            if values.is_empty() {
                return;
            }
            let (mean, half_width) = mean_and_half_width(&values);
            cells.push(Cell {
                metric,
                key,
                mean,
                half_width,
            });
        };
        if !runs.is_empty() {
            push(
                Metric::MeanRmse,
                "all".into(),
                runs.iter().map(|r| r.mean_rmse).collect(),
            );
            for h in 0..meta.horizons {
                push(
                    Metric::Rmse,
                    (h + 1).to_string(),
                    runs.iter().map(|r| r.horizon_rmse[h]).collect(),
                );
            }
            for (j, q) in meta.quantiles.iter().enumerate() {
                push(
                    Metric::QuantileRmse,
                    q.to_string(),
                    runs.iter().map(|r| r.quantile_rmse[j]).collect(),
                );
            }
            if meta.quantiles.len() >= 2 {
                let band = format!(
                    "{}-{}",
                    meta.quantiles[0],
                    meta.quantiles[meta.quantiles.len() - 1]
                );
                push(
                    Metric::Coverage,
                    band,
                    runs.iter().filter_map(|r| r.coverage).collect(),
                );
                push(
                    Metric::CrossingRate,
                    "all".into(),
                    runs.iter().filter_map(|r| r.crossing_rate).collect(),
                );
            }
        }
        Self {
            family: meta.family,
            strategy: meta.strategy,
            quantile: meta.quantile,
            quantiles: meta.quantiles,
            horizons: meta.horizons,
            runs: runs.len(),
            requested: meta.requested,
            config_hash: meta.config_hash,
            cells,
            warnings,
        }
    }

    /// Display name, e.g. `Quantile ED-LSTM`.
    pub fn model_label(&self) -> String {
        if self.quantile {
            format!("Quantile {}", self.family.label())
        } else {
            self.family.label().to_string()
        }
    }

    pub fn cell(&self, metric: Metric, key: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.metric == metric && c.key == key)
    }

    pub fn rows(&self) -> Vec<AggregateRow> {
        self.cells
            .iter()
            .map(|c| AggregateRow {
                model: self.family.as_str().to_string(),
                strategy: self.strategy,
                quantile: self.quantile,
                metric: c.metric,
                step_or_quantile: c.key.clone(),
                mean: c.mean,
                ci_half_width: c.half_width,
            })
            .collect()
    }
}

/// One line of the long-format aggregate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub strategy: Strategy,
    pub quantile: bool,
    pub metric: Metric,
    pub step_or_quantile: String,
    pub mean: f64,
    pub ci_half_width: f64,
}

const LONG_HEADER: [&str; 7] = [
    "model",
    "strategy",
    "quantile",
    "metric",
    "step_or_quantile",
    "mean",
    "ci_half_width",
];

/// Long-format CSV of one or more aggregates. Always has a header row.
pub fn aggregate_csv(reports: &[&AggregateReport]) -> Result<String, EvalError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(LONG_HEADER)?;
    for r in reports {
        for row in r.rows() {
            w.serialize(row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>, EvalError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<Result<Vec<AggregateRow>, _>>()?;
    Ok(rows)
}

fn strategy_label(s: Strategy) -> &'static str {
    match s {
        Strategy::Univariate => "Univariate",
        Strategy::Multivariate => "Multivariate",
    }
}

/// Wide table with columns `Mean, Step 1..Step m`: one row of means and one
/// of half-widths per model.
pub fn horizon_table_csv(reports: &[&AggregateReport]) -> Result<String, EvalError> {
    let m = reports.iter().map(|r| r.horizons).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "Model".to_string(),
        "Strategy".into(),
        "Statistic".into(),
        "Mean".into(),
    ];
    header.extend((1..=m).map(|h| format!("Step {h}")));
    w.write_record(&header)?;
    for r in reports {
        for (stat, pick) in [("mean", 0usize), ("ci", 1)] {
            let value = |c: Option<&Cell>| {
                c.map(|c| if pick == 0 { c.mean } else { c.half_width })
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            };
            let mut row = vec![
                r.model_label(),
                strategy_label(r.strategy).to_string(),
                stat.to_string(),
                value(r.cell(Metric::MeanRmse, "all")),
            ];
            row.extend((1..=m).map(|h| value(r.cell(Metric::Rmse, &h.to_string()))));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Wide table of per-quantile mean RMSE.
pub fn quantile_table_csv(reports: &[&AggregateReport]) -> Result<String, EvalError> {
    let levels: Vec<f64> = reports
        .iter()
        .find(|r| r.quantile)
        .map(|r| r.quantiles.clone())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Model".to_string(), "Strategy".into(), "Statistic".into()];
    header.extend(levels.iter().map(|q| q.to_string()));
    w.write_record(&header)?;
    for r in reports.iter().filter(|r| r.quantile) {
        for (stat, pick) in [("mean", 0usize), ("ci", 1)] {
            let mut row = vec![
                r.model_label(),
                strategy_label(r.strategy).to_string(),
                stat.to_string(),
            ];
            row.extend(levels.iter().map(|q| {
                r.cell(Metric::QuantileRmse, &q.to_string())
                    .map(|c| if pick == 0 { c.mean } else { c.half_width }.to_string())
                    .unwrap_or_default()
            }));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Per-horizon mean RMSE with 95% error bars, one series per report.
pub fn rmse_chart_svg(reports: &[&AggregateReport], title: &str) -> String {
    let (width, height) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let m = reports.iter().map(|r| r.horizons).max().unwrap_or(1).max(1);
    let y_max = reports
        .iter()
        .flat_map(|r| r.cells.iter().filter(|c| c.metric == Metric::Rmse))
        .map(|c| c.mean + c.half_width)
        .fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };
    let n_series = reports.len().max(1) as f64;
    let slot = plot_w / m as f64;
    let x_of = |h: usize, s: usize| {
        left + slot * (h as f64 - 0.5) + (s as f64 - (n_series - 1.0) / 2.0) * slot * 0.12
    };
    let y_of = |v: f64| top + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.4}</text>"#,
            left - 4.0,
            left - 6.0,
            y + 4.0
        );
    }
    for h in 1..=m {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{h}</text>"#,
            left + slot * (h as f64 - 0.5),
            top + plot_h + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">Prediction horizon (steps)</text>"#,
        left + plot_w / 2.0,
        height - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">RMSE</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0
    );
    for (s, r) in reports.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let _ = writeln!(svg, r#"<g stroke="{color}" fill="{color}">"#);
        for h in 1..=r.horizons {
            let Some(c) = r.cell(Metric::Rmse, &h.to_string()) else {
                continue;
            };
            let x = x_of(h, s);
            let (y0, y1) = (y_of(c.mean - c.half_width), y_of(c.mean + c.half_width));
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}"/><line x1="{:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}"/><line x1="{:.2}" y1="{y1:.2}" x2="{:.2}" y2="{y1:.2}"/><circle cx="{x:.2}" cy="{:.2}" r="3"/>"#,
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0,
                y_of(c.mean)
            );
        }
        let _ = writeln!(svg, "</g>");
        let ly = top + 16.0 + 20.0 * s as f64;
        let lx = left + plot_w + 16.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{ly}">{}</text>"#,
            ly - 10.0,
            lx + 18.0,
            escape(&format!("{} ({})", r.model_label(), strategy_label(r.strategy)))
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

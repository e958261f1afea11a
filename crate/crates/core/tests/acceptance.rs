//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criterion 8 needs a user-supplied market CSV named by
//! `QFORECAST_BITCOIN_CSV` and is skipped without it.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use qforecast::data::{make_windows, MinMaxScaler, RawSeries, Split};
use qforecast::engine::{Fill, SeededRng, Tensor};
use qforecast::eval::{
    persist_experiment, run_experiment, DatasetKind, ExperimentConfig, ExperimentOutcome, Metric,
    Strategy,
};
use qforecast::linear::{
    fit_ols_arrays, fit_quantile_arrays, fit_quantile_intercept, OlsOptions, QuantileFitOptions,
};
use qforecast::loss::{pinball, QuantileSet};
use qforecast::models::Family;
use qforecast::suite;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let entries = suite::run(100);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    check(
        failed.is_empty() && worst < suite::TOLERANCE && secs < 60.0,
        format!(
            "{} checks, max rel err {worst:.2e}, {secs:.1}s, failing: {failed:?}",
            entries.len()
        ),
    )
}

fn pinball_values() -> Outcome {
    let cases = [
        (1.0, 0.5, 0.95, 0.475),
        (0.5, 1.0, 0.95, 0.025),
        (0.7, 0.7, 0.95, 0.0),
        (0.0, 0.0, 0.05, 0.0),
    ];
    let mut worst: f64 = 0.0;
    for (y, yhat, q, want) in cases {
        match pinball(y, yhat, q) {
            Ok(v) => worst = worst.max((v - want).abs()),
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    check(worst <= 1e-15, format!("max abs deviation {worst:e}"))
}

/// Interval of minimizers of `sum pinball(x_i - c)` found by evaluating the
/// objective at every sample point.
fn grid_argmin(sample: &[f64], q: f64) -> (f64, f64) {
    let objective = |c: f64| {
        sample
            .iter()
            .map(|&x| {
                let u = x - c;
                if u >= 0.0 {
                    q * u
                } else {
                    (q - 1.0) * u
                }
            })
            .sum::<f64>()
    };
    let values: Vec<(f64, f64)> = sample.iter().map(|&c| (c, objective(c))).collect();
    let best = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let tie = 1e-12 * best.abs().max(1.0);
    let at_min = values.iter().filter(|v| v.1 <= best + tie).map(|v| v.0);
    let lo = at_min.clone().fold(f64::INFINITY, f64::min);
    let hi = at_min.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn quantile_minimizer() -> Outcome {
    let sample = Tensor::new(&[200], Fill::StandardNormal, &mut SeededRng::new(2024))
        .expect("valid shape");
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for q in [0.05, 0.25, 0.5, 0.75, 0.95] {
        let (lo, hi) = grid_argmin(sample.data(), q);
        let (c, _) = match fit_quantile_intercept(sample.data(), q, QuantileFitOptions::default()) {
            Ok(v) => v,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let dist = if c < lo { lo - c } else if c > hi { c - hi } else { 0.0 };
        worst = worst.max(dist);
        detail.push(format!("q={q}: {c:.5} in [{lo:.5}, {hi:.5}]"));
    }
    check(worst < 1e-3, format!("max distance {worst:.2e}; {}", detail.join(", ")))
}

fn mackey_glass_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(DatasetKind::MackeyGlass);
    cfg.name = "acceptance-mackey-glass".into();
    cfg.family = Family::EdLstm;
    cfg.quantile = true;
    cfg.dataset.mackey_glass.steps = 3000;
    cfg.runs = 5;
    cfg.base_seed = 1;
    cfg.train.epochs = 40;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 1e-3;
    cfg.train.lr_decay = Some(0.9);
    cfg
}

fn lorenz_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(DatasetKind::Lorenz);
    cfg.name = "acceptance-lorenz".into();
    cfg.family = Family::EdLstm;
    cfg.quantile = false;
    cfg.dataset.lorenz.steps = 10_000;
    cfg.dataset.limit = Some(3000);
    cfg.runs = 5;
    cfg.base_seed = 1;
    cfg.train.epochs = 60;
    cfg.train.batch_size = 32;
    cfg.train.learning_rate = 3e-3;
    cfg.train.lr_decay = Some(0.94);
    cfg
}

fn timed(cfg: &ExperimentConfig) -> Result<(ExperimentOutcome, f64), String> {
    let start = Instant::now();
    let out = run_experiment(cfg).map_err(|e| e.to_string())?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn mean_rmse(out: &ExperimentOutcome) -> f64 {
    out.aggregate
        .cell(Metric::MeanRmse, "all")
        .map_or(f64::NAN, |c| c.mean)
}

fn per_run(out: &ExperimentOutcome) -> String {
    out.runs
        .iter()
        .map(|r| format!("{:.4}", r.report.mean_rmse))
        .collect::<Vec<_>>()
        .join(", ")
}

fn reproduction(
    result: &Result<(ExperimentOutcome, f64), String>,
    bound: f64,
    minimum: f64,
) -> Outcome {
    match result {
        Err(e) => Outcome::Fail(e.clone()),
        Ok((out, secs)) => {
            let rmse = mean_rmse(out);
            check(
                out.runs.len() == 5 && rmse >= minimum && rmse <= bound && *secs <= 600.0,
                format!(
                    "mean RMSE {rmse:.5} over {} runs [{}], {secs:.0}s",
                    out.runs.len(),
                    per_run(out)
                ),
            )
        }
    }
}

fn quantile_ordering(result: &Result<(ExperimentOutcome, f64), String>) -> Outcome {
    let Ok((out, _)) = result else {
        return Outcome::Fail("quantile runs unavailable".into());
    };
    let ordered = out
        .runs
        .iter()
        .filter(|r| {
            let q = &r.report.quantile_rmse;
            let levels = &r.report.quantiles;
            let at = |l: f64| levels.iter().position(|&v| v == l).map(|i| q[i]);
            matches!(
                (at(0.05), at(0.5), at(0.95)),
                (Some(lo), Some(mid), Some(hi)) if mid < lo && mid < hi
            )
        })
        .count();
    check(
        ordered >= 4,
        format!("{ordered} of {} quantile runs ordered", out.runs.len()),
    )
}

fn coverage(result: &Result<(ExperimentOutcome, f64), String>) -> Outcome {
    let Ok((out, _)) = result else {
        return Outcome::Fail("quantile runs unavailable".into());
    };
    let runs: Vec<f64> = out.runs.iter().filter_map(|r| r.report.coverage).collect();
    let Some(cell) = out.aggregate.cell(Metric::Coverage, "0.05-0.95") else {
        return Outcome::Fail("no coverage cell".into());
    };
    check(
        (0.78..=0.98).contains(&cell.mean),
        format!(
            "mean coverage {:.4}, per run {:?}",
            cell.mean,
            runs.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn crypto() -> Outcome {
    let Some(path) = std::env::var_os("QFORECAST_BITCOIN_CSV") else {
        return Outcome::Skip("set QFORECAST_BITCOIN_CSV to a daily market CSV".into());
    };
    let mut cfg = ExperimentConfig::preset(DatasetKind::Crypto);
    cfg.name = "acceptance-bitcoin".into();
    cfg.dataset.path = Some(PathBuf::from(path));
    cfg.strategy = Strategy::Multivariate;
    cfg.quantile = true;
    cfg.runs = 5;
    cfg.base_seed = 1;
    cfg.train.epochs = 40;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 1e-3;
    cfg.train.lr_decay = Some(0.9);
    reproduction(&timed(&cfg), 0.03, 0.008)
}

fn pipeline() -> Outcome {
    let mut rng = SeededRng::new(99);
    for _ in 0..200 {
        let t = 3 + (rng.uniform() * 200.0) as usize;
        let d = 1 + (rng.uniform() * (t as f64 / 2.0)) as usize;
        let m = 1 + (rng.uniform() * 5.0) as usize;
        let series = RawSeries::univariate("s", "Value", (0..t).map(|i| i as f64).collect());
        match make_windows(&series, d, m, "Value") {
            Ok(ds) if t >= d + m && ds.len() == t - d - m + 1 => {}
            Err(_) if t <= d + m => {}
            _ => return Outcome::Fail(format!("window count wrong for T={t}, d={d}, m={m}")),
        }
    }

    let values: Vec<f64> = (0..300).map(|_| rng.uniform_range(-50.0, 80.0)).collect();
    let columns = vec!["Value".to_string()];
    let scaler = match MinMaxScaler::fit(&columns, &values, 0..values.len()) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let round_trip = values
        .iter()
        .map(|&v| (scaler.invert(0, scaler.apply(0, v)) - v).abs())
        .fold(0.0, f64::max);
    if round_trip > 1e-12 {
        return Outcome::Fail(format!("scaling round trip error {round_trip:e}"));
    }

    for n in [5, 17, 100, 2397] {
        let split = Split::shuffled(n, 7);
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        let cut = (0.8 * n as f64).round() as usize;
        if all != (0..n).collect::<Vec<_>>() || split.train.len() != cut {
            return Outcome::Fail(format!("split of {n} is not an 80:20 partition"));
        }
    }

    let mut cfg = ExperimentConfig::preset(DatasetKind::MackeyGlass);
    cfg.name = "replay".into();
    cfg.dataset.mackey_glass.steps = 400;
    cfg.hidden = Some((6, 6));
    cfg.train.epochs = 3;
    cfg.train.batch_size = 32;
    cfg.runs = 3;
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = match tempfile::tempdir() {
            Ok(d) => d,
            Err(e) => return Outcome::Fail(e.to_string()),
        };
        let written = run_experiment(&cfg).and_then(|out| persist_experiment(&out, dir.path()));
        match written {
            Ok(path) => bytes.push((
                fs::read(path.join("aggregate.csv")).unwrap_or_default(),
                fs::read(path.join("aggregate.json")).unwrap_or_default(),
            )),
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    check(
        !bytes[0].0.is_empty() && bytes[0] == bytes[1],
        format!(
            "200 window triples, round trip {round_trip:.1e}, split partitions, replayed campaign {} bytes",
            bytes[0].0.len()
        ),
    )
}

fn baseline() -> Outcome {
    let n = 1000;
    let beta = [[1.5, -0.7], [-2.0, 0.9], [0.8, 2.5]];
    let mut rng = SeededRng::new(31);
    let x: Vec<f64> = (0..n * 3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mut y = Vec::with_capacity(n * 2);
    for row in x.chunks(3) {
        for h in 0..2 {
            let signal: f64 = (0..3).map(|i| row[i] * beta[i][h]).sum();
            y.push(0.3 + signal + rng.uniform_range(-0.5, 0.5));
        }
    }
    let x = Tensor::from_vec(&[n, 3, 1], x).expect("valid shape");
    let y = Tensor::from_vec(&[n, 2], y).expect("valid shape");
    let ols = fit_ols_arrays(&x, &y, OlsOptions::default());
    let gd = fit_quantile_arrays(&x, &y, &QuantileSet::median_only(), QuantileFitOptions::default());
    let (ols, gd) = match (ols, gd) {
        (Ok(a), Ok(b)) => (a, b.model),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e.to_string()),
    };
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for h in 0..2 {
            let a = ols.coef_at(i, h, 0);
            let b = gd.coef_at(i, h, 0);
            worst = worst.max(((a - b) / a).abs());
        }
    }
    check(worst < 0.05, format!("max coefficient relative difference {worst:.4}"))
}

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(true)
        .try_init();
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {n:>2} {name}: {detail}");
    };

    report(1, "gradient correctness", gradients());
    report(2, "pinball unit values", pinball_values());
    report(3, "quantile minimizer", quantile_minimizer());
    let mg = timed(&mackey_glass_config());
    report(4, "mackey-glass reproduction", reproduction(&mg, 0.03, 0.0));
    let lorenz = timed(&lorenz_config());
    report(5, "lorenz reproduction", reproduction(&lorenz, 0.01, 0.0));
    report(6, "quantile ordering", quantile_ordering(&mg));
    report(7, "band coverage", coverage(&mg));
    report(8, "crypto reproduction", crypto());
    report(9, "pipeline properties", pipeline());
    report(10, "baseline agreement", baseline());

    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use qforecast::data::{gen_lorenz, gen_mackey_glass, write_csv, LorenzParams, MackeyGlassParams, NormalizeScope};
use qforecast::eval::{
    aggregate_csv, evaluate_model, horizon_table_csv, load_series, persist_experiment,
    prepare_dataset, quantile_table_csv, reaggregate, rmse_chart_svg, run_experiment, train_run,
    write_aggregate, AggregateReport, DatasetKind, EvalError, ExperimentConfig, Strategy,
};
use qforecast::loss::Arrangement;
use qforecast::models::Family;
use qforecast::suite;
use qforecast::train::TrainingState;

const OUTPUT_ENV: &str = "QFORECAST_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "qforecast", version, about = "Quantile deep learning for multi-step forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic series to CSV.
    Generate(GenerateArgs),
    /// Train and evaluate a single run.
    Train(TrainArgs),
    /// Run a multi-seed campaign and write aggregate reports.
    Experiment(ExperimentArgs),
    /// Re-aggregate persisted experiments.
    Report(ReportArgs),
    /// Finite-difference gradient checks of every op and model family.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// mackey-glass or lorenz.
    #[arg(long, default_value = "mackey-glass")]
    dataset: String,
    #[arg(long)]
    steps: Option<usize>,
    /// Seed of the Mackey-Glass history jitter.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Write x, y and z instead of the selected Lorenz component.
    #[arg(long)]
    all_components: bool,
    /// Lorenz component index (0, 1, 2).
    #[arg(long)]
    component: Option<usize>,
    /// Output file; defaults to `<output-dir>/<dataset>.csv`.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, env = OUTPUT_ENV)]
    output_dir: Option<PathBuf>,
}

/// Experiment fields; each overrides the config file.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with experiment fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// mackey-glass, lorenz, crypto or univariate.
    #[arg(long)]
    dataset: Option<String>,
    /// CSV input for crypto and univariate datasets.
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Length of a generated series.
    #[arg(long)]
    steps: Option<usize>,
    /// univariate or multivariate.
    #[arg(long)]
    strategy: Option<String>,
    /// lstm, bdlstm, edlstm, convlstm or linear.
    #[arg(long)]
    family: Option<String>,
    /// Train on the pinball loss (true) or squared error (false).
    #[arg(long)]
    quantile: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizons: Option<usize>,
    /// Two recurrent sizes, e.g. `100,100`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// grouped or vector.
    #[arg(long)]
    arrangement: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Per-epoch multiplicative learning-rate decay.
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
    /// whole-series or train-only.
    #[arg(long)]
    normalize: Option<String>,
    #[arg(long)]
    denormalized_metrics: bool,
    #[arg(long, env = OUTPUT_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    save_models: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run seed; defaults to the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the training state every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Training-state file to write; defaults to `checkpoint.json` in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a training-state file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directories written by `experiment`.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write a combined report of all directories here.
    #[arg(long)]
    combined: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random graphs per op kind.
    #[arg(long, default_value_t = 100)]
    trials: u64,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Experiment(a) => experiment(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn output_root(dir: Option<&Path>) -> PathBuf {
    dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"))
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let kind: DatasetKind = a.dataset.parse()?;
    let series = match kind {
        DatasetKind::MackeyGlass => {
            let mut p = MackeyGlassParams::default();
            if let Some(steps) = a.steps {
                p.steps = steps;
            }
            gen_mackey_glass(&p, a.data_seed).map_err(EvalError::from)?
        }
        DatasetKind::Lorenz => {
            let mut p = LorenzParams::default();
            if let Some(steps) = a.steps {
                p.steps = steps;
            }
            if let Some(c) = a.component {
                p.component = c;
            }
            let s = gen_lorenz(&p).map_err(EvalError::from)?;
            if a.all_components {
                s.full
            } else {
                s.component
            }
        }
        other => {
            return Err(config_err(format!(
                "`{}` is not a generated dataset",
                other.as_str()
            )))
        }
    };
    let path = match a.output {
        Some(p) => p,
        None => output_root(a.output_dir.as_deref()).join(format!("{}.csv", kind.as_str())),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(runtime_err)?;
    }
    write_csv(&series, &path).map_err(runtime_err)?;
    println!("wrote {} rows to {}", series.len(), path.display());
    Ok(())
}

fn build_config(a: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let flag_kind = a.dataset.as_deref().map(str::parse::<DatasetKind>).transpose()?;
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::from_toml_file(path)?,
        None => ExperimentConfig::preset(flag_kind.unwrap_or_default()),
    };
    if let Some(kind) = flag_kind {
        cfg.dataset.kind = kind;
    }
    let d = &mut cfg.dataset;
    if let Some(p) = &a.data_path {
        d.path = Some(p.clone());
    }
    if let Some(t) = &a.target {
        d.target = Some(t.clone());
    }
    if a.stride.is_some() {
        d.stride = a.stride;
    }
    if a.limit.is_some() {
        d.limit = a.limit;
    }
    if let Some(s) = a.data_seed {
        d.data_seed = s;
    }
    if let Some(steps) = a.steps {
        d.mackey_glass.steps = steps;
        d.lorenz.steps = steps;
    }
    if let Some(n) = &a.name {
        cfg.name = n.clone();
    }
    if let Some(s) = &a.strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(f) = &a.family {
        cfg.family = f.parse::<Family>().map_err(config_err)?;
    }
    if let Some(q) = a.quantile {
        cfg.quantile = q;
    }
    if let Some(q) = &a.quantiles {
        cfg.quantiles = q.clone();
    }
    if let Some(w) = a.window {
        cfg.window = w;
    }
    if let Some(m) = a.horizons {
        cfg.horizons = m;
    }
    if let Some(h) = &a.hidden {
        let [h1, h2] = h[..] else {
            return Err(config_err("--hidden takes two sizes, e.g. 100,100"));
        };
        cfg.hidden = Some((h1, h2));
    }
    if let Some(s) = &a.arrangement {
        cfg.arrangement = match s.as_str() {
            "grouped" => Arrangement::Grouped,
            "vector" => Arrangement::Vector,
            _ => return Err(config_err(format!("unknown arrangement `{s}`"))),
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if a.clip_norm.is_some() {
        cfg.train.clip_norm = a.clip_norm;
    }
    if a.lr_decay.is_some() {
        cfg.train.lr_decay = a.lr_decay;
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(s) = a.base_seed {
        cfg.base_seed = s;
    }
    if let Some(s) = &a.normalize {
        cfg.normalize = match s.as_str() {
            "whole-series" => NormalizeScope::WholeSeries,
            "train-only" => NormalizeScope::TrainOnly,
            _ => return Err(config_err(format!("unknown normalization scope `{s}`"))),
        };
    }
    cfg.denormalized_metrics |= a.denormalized_metrics;
    cfg.save_models |= a.save_models;
    if a.output_dir.is_some() {
        cfg.output_dir = a.output_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = build_config(&a.config)?;
    if a.checkpoint_every.is_some() {
        cfg.train.checkpoint_every = a.checkpoint_every;
    }
    cfg.validate()?;
    let seed = a.seed.unwrap_or(cfg.base_seed);
    let dir = output_root(cfg.output_dir.as_deref())
        .join(&cfg.name)
        .join(format!("train-{seed}"));
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.json"));
    let resume = match &a.resume {
        Some(p) => Some(TrainingState::load(p).map_err(config_err)?),
        None => None,
    };

    let (series, target) = load_series(&cfg)?;
    let ds = prepare_dataset(&cfg, &series, &target, seed)?;
    let start = Instant::now();
    let mut on_checkpoint = |state: &TrainingState| {
        log::info!("epoch {}: checkpoint {}", state.epoch, ckpt_path.display());
        state.save(&ckpt_path)
    };
    let (model, trace) = train_run(&cfg, &ds, seed, resume, &mut on_checkpoint)?;
    let (mut report, _, _) = evaluate_model(&model, &ds, cfg.denormalized_metrics)?;
    report.seed = seed;
    report.final_loss = trace.last().copied();
    report.seconds = start.elapsed().as_secs_f64();

    fs::write(dir.join("config.json"), to_json(&cfg)?).map_err(runtime_err)?;
    model.save(&dir.join("model.json")).map_err(runtime_err)?;
    fs::write(dir.join("report.json"), to_json(&report)?).map_err(runtime_err)?;
    let mut trace_csv = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        trace_csv.push_str(&format!("{},{l}\n", e + 1));
    }
    fs::write(dir.join("trace.csv"), trace_csv).map_err(runtime_err)?;

    println!("run {seed}: mean RMSE {:.6}", report.mean_rmse);
    for (q, r) in report.quantiles.iter().zip(&report.quantile_rmse) {
        println!("  q={q}: RMSE {r:.6}");
    }
    if let Some(c) = report.coverage {
        println!("  band coverage {c:.4}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(runtime_err)
}

fn experiment(a: ExperimentArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.config)?;
    let root = output_root(cfg.output_dir.as_deref());
    log::info!(
        "{}: {} runs of {} on {}",
        cfg.name,
        cfg.runs,
        cfg.family,
        cfg.dataset.kind.as_str()
    );
    let outcome = run_experiment(&cfg)?;
    let dir = persist_experiment(&outcome, &root)?;
    print_summary(&outcome.aggregate)?;
    for f in &outcome.failures {
        eprintln!("run {} failed: {}", f.seed, f.error);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn print_summary(agg: &AggregateReport) -> Result<(), Failure> {
    println!(
        "{} ({} of {} runs)",
        agg.model_label(),
        agg.runs,
        agg.requested
    );
    print!("{}", horizon_table_csv(&[agg])?);
    if agg.quantile {
        print!("{}", quantile_table_csv(&[agg])?);
    }
    for w in &agg.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut all = Vec::new();
    for dir in &a.dirs {
        if !dir.join("config.json").is_file() {
            return Err(config_err(format!(
                "{} is not an experiment directory",
                dir.display()
            )));
        }
        let (cfg, agg) = reaggregate(dir)?;
        let title = format!("{} on {}", agg.model_label(), cfg.dataset.kind.as_str());
        write_aggregate(dir, &agg, &title)?;
        print_summary(&agg)?;
        all.push(agg);
    }
    if let Some(out) = &a.combined {
        let refs: Vec<&AggregateReport> = all.iter().collect();
        fs::create_dir_all(out).map_err(runtime_err)?;
        let write = |name: &str, text: String| fs::write(out.join(name), text).map_err(runtime_err);
        write("aggregate.csv", aggregate_csv(&refs)?)?;
        write("table.csv", horizon_table_csv(&refs)?)?;
        write("quantiles.csv", quantile_table_csv(&refs)?)?;
        write("rmse.svg", rmse_chart_svg(&refs, "RMSE by prediction horizon"))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let entries = suite::run(a.trials);
    let mut failed = 0;
    for e in &entries {
        println!(
            "{} {:<24} max rel err {:.2e} ({} checked, {} at kinks)",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.max_rel_error,
            e.checked,
            e.excluded
        );
        failed += usize::from(!e.passed);
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        entries.len() - failed,
        entries.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(runtime_err(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

//! End-to-end runs of the `qforecast` binary.

use std::path::Path;
use std::process::{Command, Output};

fn qforecast(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qforecast"))
        .args(args)
        .env("QFORECAST_OUTPUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qforecast")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &[&str] = &[
    "--steps",
    "300",
    "--window",
    "4",
    "--horizons",
    "2",
    "--hidden",
    "3,3",
    "--epochs",
    "2",
    "--batch-size",
    "32",
    "--runs",
    "2",
];

#[test]
fn generate_writes_mackey_glass_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = qforecast(dir.path(), &["generate", "--steps", "120"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("mackey-glass.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("Step,Value"));
    assert_eq!(lines.count(), 120);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&qforecast(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&qforecast(dir.path(), &["experiment", "--runs", "0"])), 1);
    assert_eq!(
        code(&qforecast(dir.path(), &["experiment", "--hidden", "3,3,3"])),
        1
    );
    assert_eq!(
        code(&qforecast(dir.path(), &["report", "/definitely/not/here"])),
        1
    );
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_field = 3\n").unwrap();
    let o = qforecast(dir.path(), &["experiment", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "Date,Value\n2020-01-01,1\n2020-01-02,nan\n").unwrap();
    let o = qforecast(
        dir.path(),
        &[
            "experiment",
            "--dataset",
            "univariate",
            "--data-path",
            csv.to_str().unwrap(),
            "--runs",
            "1",
        ],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn experiment_is_reproducible_and_reaggregates() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["experiment", "--name", "tiny"];
    args.extend_from_slice(TINY);
    for dir in [a.path(), b.path()] {
        let o = qforecast(dir, &args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["aggregate.csv", "aggregate.json", "table.csv"] {
        let x = std::fs::read(a.path().join("tiny").join(file)).unwrap();
        let y = std::fs::read(b.path().join("tiny").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    let before = std::fs::read(a.path().join("tiny/aggregate.csv")).unwrap();
    let o = qforecast(a.path(), &["report", a.path().join("tiny").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let after = std::fs::read(a.path().join("tiny/aggregate.csv")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn toml_config_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "name = \"from-toml\"\nruns = 5\nwindow = 4\nhorizons = 2\nhidden = [3, 3]\n\
         [train]\nepochs = 1\nbatch_size = 32\n[dataset.mackey_glass]\nsteps = 300\n",
    )
    .unwrap();
    let o = qforecast(
        dir.path(),
        &["experiment", "-c", cfg.to_str().unwrap(), "--runs", "1"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let agg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("from-toml/aggregate.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(agg["runs"], 1);
}

#[test]
fn train_resumes_from_checkpoint_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = vec!["train", "--name", "full", "--epochs", "4"];
    full.extend_from_slice(&TINY[..8]);
    let o = qforecast(dir.path(), &full);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let mut half = vec!["train", "--name", "half", "--epochs", "2", "--checkpoint-every", "2"];
    half.extend_from_slice(&TINY[..8]);
    assert_eq!(code(&qforecast(dir.path(), &half)), 0);
    let ckpt = dir.path().join("half/train-1/checkpoint.json");
    let mut resumed = vec!["train", "--name", "resumed", "--epochs", "4"];
    resumed.extend_from_slice(&TINY[..8]);
    resumed.extend_from_slice(&["--resume", ckpt.to_str().unwrap()]);
    let o = qforecast(dir.path(), &resumed);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let a = std::fs::read(dir.path().join("full/train-1/model.json")).unwrap();
    let b = std::fs::read(dir.path().join("resumed/train-1/model.json")).unwrap();
    assert_eq!(a, b);
}

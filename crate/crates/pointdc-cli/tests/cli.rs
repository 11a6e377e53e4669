//! End-to-end tests of the `pointdc` binary: a scripted pipeline over a tiny
//! dataset, reproducibility of its outputs, and the error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pointdc"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn pointdc");
    assert!(
        out.status.success(),
        "pointdc {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn run_err(args: &[&str]) -> (Output, String) {
    let out = bin().args(args).output().expect("spawn pointdc");
    assert!(!out.status.success(), "pointdc {args:?} unexpectedly passed");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    (out, stderr)
}

/// A configuration small enough that the whole pipeline runs in seconds.
const TINY_CONFIG: &str = "\
scenes = 2
classes = 3
clusters = 3
feature_dim = 8
points_per_scene = 700
cameras = 2
image_size = 32
objects_min = 3
objects_max = 3
hidden = 16
cmd_epochs = 2
svc_iterations = 1
svc_epochs = 1
probe_epochs = 5
";

fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

/// Runs synth → partition → distill → svc → eval under `root`, returning the
/// bytes of the final metrics report.
fn scripted_pipeline(root: &Path, config: &Path, seed: &str) -> Vec<u8> {
    let config = path_str(config);
    let data = path_str(&root.join("data"));
    let parts = path_str(&root.join("parts"));
    let cmd = path_str(&root.join("cmd"));
    let svc = path_str(&root.join("svc"));
    let eval = path_str(&root.join("eval"));
    let ckpt = path_str(&root.join("cmd").join("checkpoint.pdck"));
    let svc_ckpt = path_str(&root.join("svc").join("checkpoint.pdck"));
    run_ok(&["synth", "--config", &config, "--out", &data, "--seed", seed]);
    run_ok(&[
        "partition", "--config", &config, "--data", &data, "--out", &parts, "--seed", seed,
    ]);
    run_ok(&[
        "distill", "--config", &config, "--data", &data, "--partitions", &parts, "--out", &cmd,
        "--seed", seed,
    ]);
    run_ok(&[
        "svc", "--config", &config, "--data", &data, "--partitions", &parts, "--checkpoint",
        &ckpt, "--out", &svc, "--seed", seed,
    ]);
    run_ok(&[
        "eval", "--config", &config, "--data", &data, "--partitions", &parts, "--checkpoint",
        &svc_ckpt, "--out", &eval, "--seed", seed,
    ]);
    std::fs::read(root.join("eval").join("metrics.txt")).unwrap()
}

#[test]
fn scripted_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let metrics = scripted_pipeline(dir.path(), &config, "0");

    let report = pointdc::codec::load_metrics(dir.path().join("eval/metrics.txt")).unwrap();
    assert!(report.miou >= 0.0 && report.miou <= 1.0);
    assert!(!metrics.is_empty());

    for run in ["data", "parts", "cmd", "svc", "eval"] {
        assert!(dir.path().join(run).join("config.toml").exists(), "{run}");
        assert!(dir.path().join(run).join("run.json").exists(), "{run}");
    }
    assert!(dir.path().join("data/manifest.json").exists());
    assert!(dir.path().join("parts/partitions.json").exists());
    assert!(dir.path().join("cmd/checkpoint.pdck").exists());
    assert!(dir.path().join("svc/checkpoint.pdck").exists());

    // The echoed config is the effective one: it must parse and keep the
    // file's overrides.
    let echoed = std::fs::read_to_string(dir.path().join("eval/config.toml")).unwrap();
    assert!(echoed.contains("scenes = 2"), "{echoed}");
}

#[test]
fn same_seed_reproduces_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let first = scripted_pipeline(&dir.path().join("a"), &config, "7");
    let second = scripted_pipeline(&dir.path().join("b"), &config, "7");
    assert_eq!(first, second);
}

#[test]
fn baseline_and_probe_run_on_the_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_config(dir.path());
    let config = path_str(&config_path);
    let data = path_str(&dir.path().join("data"));
    run_ok(&["synth", "--config", &config, "--out", &data]);

    let base = path_str(&dir.path().join("base"));
    run_ok(&["baseline", "--config", &config, "--data", &data, "--out", &base]);
    let base_ckpt = path_str(&dir.path().join("base/checkpoint.pdck"));

    // A head-only checkpoint evaluates per point, no partitions involved.
    let eval = path_str(&dir.path().join("eval_base"));
    run_ok(&[
        "eval", "--config", &config, "--data", &data, "--checkpoint", &base_ckpt, "--out", &eval,
    ]);

    let probe = path_str(&dir.path().join("probe"));
    run_ok(&[
        "probe", "--config", &config, "--data", &data, "--checkpoint", &base_ckpt, "--out",
        &probe,
    ]);
    let report = pointdc::codec::load_metrics(dir.path().join("probe/metrics.txt")).unwrap();
    assert!(report.accuracy > 0.0);
}

#[test]
fn eval_without_checkpoint_reports_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_config(dir.path());
    let config = path_str(&config_path);
    let data = path_str(&dir.path().join("data"));
    run_ok(&["synth", "--config", &config, "--out", &data]);

    let eval = path_str(&dir.path().join("eval"));
    let (_, stderr) = run_err(&["eval", "--config", &config, "--data", &data, "--out", &eval]);
    assert!(stderr.contains("missing checkpoint"), "{stderr}");

    let (_, stderr) = run_err(&[
        "eval", "--config", &config, "--data", &data, "--checkpoint", "/nonexistent.pdck",
        "--out", &eval,
    ]);
    assert!(stderr.contains("missing checkpoint"), "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "svc_epocs = 3\n").unwrap();
    let out = path_str(&dir.path().join("out"));
    let (output, stderr) = run_err(&["synth", "--config", &path_str(&config), "--out", &out]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr.contains("svc_epocs"), "{stderr}");
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
}

#[test]
fn unknown_flags_and_subcommands_fail_with_one_line() {
    let (output, stderr) = run_err(&["synth", "--bogus", "x", "--out", "y"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr.trim().lines().count() == 1 && stderr.contains("--bogus"), "{stderr}");

    let (output, stderr) = run_err(&["frobnicate"]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr.trim().lines().count() == 1, "{stderr}");
}

#[test]
fn region_strategy_partitions_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("region.toml");
    std::fs::write(&config, format!("{TINY_CONFIG}strategy = \"region\"\n")).unwrap();
    let config = path_str(&config);
    let data = path_str(&dir.path().join("data"));
    let parts = path_str(&dir.path().join("parts"));
    run_ok(&["synth", "--config", &config, "--out", &data]);
    run_ok(&["partition", "--config", &config, "--data", &data, "--out", &parts]);
    let part =
        pointdc::codec::load_partition(dir.path().join("parts/partition_000.pdsv")).unwrap();
    assert!(part.num_voxels() > 1);
}

#[test]
fn seed_flag_overrides_config_seed_in_echo() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_tiny_config(dir.path());
    let data = path_str(&dir.path().join("data"));
    run_ok(&[
        "synth", "--config", &path_str(&config_path), "--out", &data, "--seed", "42",
    ]);
    let echoed = std::fs::read_to_string(dir.path().join("data/config.toml")).unwrap();
    assert!(echoed.contains("seed = 42"), "{echoed}");
}

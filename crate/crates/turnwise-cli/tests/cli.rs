//! End-to-end tests of the `turnwise` binary: verb wiring, config/env/flag
//! override precedence, determinism of artifacts, and error reporting.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turnwise"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "groups = 4\nrollouts = 4\niterations = 2\ncheckpoint_every = 2\n\
         probe_prompts = 2\nprobe_rollouts = 2\nprobe_oracle_samples = 2\n\
         eval_prompts = 2\neval_rollouts = 2\nstability_window = 2\nseed = 3\n",
    )
    .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary should spawn");
    assert!(
        out.status.success(),
        "expected success\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    // Deliberately nested, not-yet-existing output path.
    let out_a = tmp.path().join("runs/nested/a");
    let out_b = tmp.path().join("runs/nested/b");
    for out in [&out_a, &out_b] {
        let stdout = run_ok(
            bin()
                .args(["train", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(out),
        )
        .stdout;
        let text = String::from_utf8(stdout).unwrap();
        assert!(text.contains("final mean_outcome:"), "{text}");
    }
    for name in ["metrics.csv", "config.toml", "manifest.txt", "probe.json"] {
        assert!(out_a.join(name).exists(), "{name} missing");
    }
    assert!(out_a.join("step_0/policy.bin").exists());
    assert!(out_a.join("step_2/policy.bin").exists());
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(a, b, "same config + seed must reproduce metrics byte for byte");
}

#[test]
fn zero_iterations_yields_header_only_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("run0");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env("TURNWISE_ITERATIONS", "0"),
    );
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only: {metrics}");
}

#[test]
fn flag_overrides_beat_env_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out_env = tmp.path().join("env");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_env)
            .env("TURNWISE_SEED", "9"),
    );
    let cfg = std::fs::read_to_string(out_env.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 9"), "env override should apply: {cfg}");

    let out_flag = tmp.path().join("flag");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out_flag)
            .arg("--seed")
            .arg("11")
            .env("TURNWISE_SEED", "9"),
    );
    let cfg = std::fs::read_to_string(out_flag.join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 11"), "flag should beat env: {cfg}");
}

#[test]
fn eval_and_diagnose_consume_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    run_ok(
        bin()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out),
    );
    let stdout = run_ok(
        bin()
            .args(["eval", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .arg("--checkpoint")
            .arg(out.join("step_2")),
    )
    .stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("mean_outcome:"), "{text}");
    assert!(out.join("eval.csv").exists());

    let stdout = run_ok(bin().args(["diagnose", "--out"]).arg(&out)).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("agreement.csv"), "{text}");
    for name in ["kendall.csv", "stability.csv", "slopes.csv", "agreement.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn sweep_runs_a_small_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let cells = tmp.path().join("cells.toml");
    std::fs::write(
        &cells,
        "seeds = [5]\n\n[[cells]]\nstrategy = \"trajectory_share\"\nestimator = \"rloo\"\n",
    )
    .unwrap();
    let out = tmp.path().join("sweep");
    let stdout = run_ok(
        bin()
            .args(["sweep", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .arg("--cells")
            .arg(&cells),
    )
    .stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.contains("trajectory_share × rloo"), "{text}");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "header + one cell: {csv}");
    assert!(out.join("trajectory_share_rloo/seed_5/metrics.csv").exists());
}

#[test]
fn errors_exit_nonzero_with_stderr_line() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_config(tmp.path());
    let out = bin()
        .args(["eval", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(tmp.path().join("x"))
        .arg("--checkpoint")
        .arg(tmp.path().join("no_such_checkpoint"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("error:"), "{stderr}");

    // Invalid config field value is reported, not panicked.
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "eta = 0.0\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("eta"), "{stderr}");
}

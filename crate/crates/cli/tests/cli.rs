//! End-to-end tests of the binary: config handling, output files, pairing,
//! determinism, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gia-lab");

const CONFIG: &str = r#"
[dataset]
source = "synthetic"
dim = 4
batch_size = 8
seed = 17
rule = "linear-noise"

[model]
attack_neurons = 16
hidden = [8]

[loss]
kind = "squared-error"

[client]
mode = "fedsgd-fullbatch"

[attack]
direction_distribution = { kind = "normal", mean = 0.0, std = 0.01 }
downstream_distribution = { kind = "uniform", lo = 0.01, hi = 0.02 }
seed = 3

[ctp]
variant = "eps_eq"

[run]
rounds_budget = 60
seeds = [1, 2]
"#;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn run_bin(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn read_rows(outdir: &Path) -> Vec<Vec<String>> {
    let body = std::fs::read_to_string(outdir.join("results.csv")).unwrap();
    body.lines().map(|l| l.split(',').map(|c| c.to_string()).collect()).collect()
}

/// Rows minus the trailing wall-time column.
fn stable_rows(outdir: &Path) -> Vec<Vec<String>> {
    read_rows(outdir)
        .into_iter()
        .map(|mut r| {
            r.pop();
            r
        })
        .collect()
}

#[test]
fn run_produces_results_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    let ra = run_bin(&["run", "--config", config.to_str().unwrap(), "--outdir", out_a.to_str().unwrap()]);
    assert!(ra.status.success(), "stderr: {}", String::from_utf8_lossy(&ra.stderr));
    assert!(out_a.join("results.csv").is_file());
    assert!(out_a.join("effective_config.toml").is_file());
    // one trace per (method, seed)
    for method in ["vgia", "ctp_eq"] {
        for seed in [1, 2] {
            let name = format!("trace_{method}_synthetic-d4-B8_s{seed}.json");
            assert!(out_a.join(&name).is_file(), "missing {name}");
        }
    }

    let rows = read_rows(&out_a);
    assert_eq!(
        rows[0],
        vec![
            "method",
            "dataset",
            "seed",
            "B",
            "d",
            "N",
            "rounds_budget",
            "n_correct",
            "n_spurious",
            "rounds_to_verifiability",
            "fp_certificates",
            "eps",
            "eps_w",
            "wall_ms"
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()
    );
    // 2 methods x 2 seeds + 2 aggregate rows each
    assert_eq!(rows.len(), 1 + 4 + 4);

    let rb = run_bin(&["run", "--config", config.to_str().unwrap(), "--outdir", out_b.to_str().unwrap()]);
    assert!(rb.status.success());
    assert_eq!(stable_rows(&out_a), stable_rows(&out_b), "reruns must be byte-identical");
}

#[test]
fn set_override_lands_in_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let r = run_bin(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
        "--seed",
        "7",
        "--set",
        "attack.span_tolerance=1e-7",
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let effective = std::fs::read_to_string(out.join("effective_config.toml")).unwrap();
    assert!(effective.contains("span_tolerance = 1e-7") || effective.contains("span_tolerance = 0.0000001"),
        "override missing from effective config:\n{effective}");
    let rows = read_rows(&out);
    // data rows carry only seed 7
    assert!(rows[1..].iter().filter(|r| r[2] == "7").count() >= 1);
    assert!(rows[1..].iter().all(|r| r[2] == "7" || r[2] == "mean" || r[2] == "std"));
}

#[test]
fn compare_pairs_share_the_direction() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let out = dir.path().join("out");
    let r = run_bin(&[
        "compare",
        "--config",
        config.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let rows = read_rows(&out);
    for seed in ["1", "2"] {
        let eps_w: Vec<&String> = rows[1..]
            .iter()
            .filter(|r| r[2] == *seed)
            .map(|r| &r[12])
            .collect();
        assert_eq!(eps_w.len(), 2, "two methods per seed");
        assert_eq!(eps_w[0], eps_w[1], "paired runs must share w and D");
        assert!(!eps_w[0].is_empty());
    }
}

#[test]
fn sweep_expands_the_grid() {
    let body = CONFIG
        .replace(
            "[client]\nmode = \"fedsgd-fullbatch\"",
            "[client]\nmode = \"fedavg\"\nlocal_epochs = 1\nlocal_batch_size = 4\nlearning_rate = 1e-4\nshuffle_seed = 1",
        )
        .replace(
            "[run]",
            "[sweep]\nmethods = [\"vgia\"]\nlocal_epochs = [1, 2]\nlocal_batch_size = [4]\n\n[run]",
        );
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &body);
    let out = dir.path().join("out");
    let r = run_bin(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let rows = read_rows(&out);
    let labels: Vec<&String> = rows[1..].iter().map(|r| &r[1]).collect();
    assert!(labels.iter().any(|l| l.contains("-E1-bs4")));
    assert!(labels.iter().any(|l| l.contains("-E2-bs4")));
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &format!("{CONFIG}\n[attack2]\nx = 1\n"));
    let r = run_bin(&["run", "--config", config.to_str().unwrap()]);
    assert!(!r.status.success());
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("attack2"), "stderr: {stderr}");

    let config3 = write_config(
        dir.path(),
        &CONFIG.replace("seed = 3", "seed = 3\ntypo_key = 1"),
    );
    let r3 = run_bin(&["run", "--config", config3.to_str().unwrap()]);
    assert!(!r3.status.success());
    let stderr3 = String::from_utf8_lossy(&r3.stderr);
    assert!(stderr3.contains("attack.typo_key"), "stderr: {stderr3}");
}

#[test]
fn selftest_passes_clean_and_fails_corrupted() {
    let r = run_bin(&["selftest"]);
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert_eq!(stdout.matches(": PASS").count(), 4, "{stdout}");

    let r2 = run_bin(&["selftest", "--set", "attack.span_tolerance=1e3"]);
    assert!(!r2.status.success());
    let stdout2 = String::from_utf8_lossy(&r2.stdout);
    assert!(stdout2.contains(": FAIL"), "{stdout2}");
}

#[test]
fn selftest_is_deterministic() {
    let a = run_bin(&["selftest"]);
    let b = run_bin(&["selftest"]);
    assert_eq!(a.stdout, b.stdout);
}

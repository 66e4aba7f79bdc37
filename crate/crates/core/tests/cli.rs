//! Binary-level checks: exit codes and output file shapes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regime-factor"))
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["walkforward", "--set", "signal.alpah=1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpah"));
}

#[test]
fn missing_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["walkforward", "--set", "data.path=\"/does/not/exist.csv\""], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn randomize_writes_one_row_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let out = run(
        &["randomize", "--config", cfg.to_str().unwrap(), "--set", "robustness.n_trials=25"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trials = std::fs::read_to_string(dir.path().join("trials.csv")).unwrap();
    let mut lines = trials.lines();
    assert!(lines.next().unwrap().starts_with("# config-hash: "));
    assert_eq!(lines.next(), Some("trial,sharpe"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 25);
    for (k, row) in rows.iter().enumerate() {
        let (idx, sharpe) = row.split_once(',').unwrap();
        assert_eq!(idx.parse::<usize>().unwrap(), k);
        assert!(sharpe.parse::<f64>().unwrap().is_finite());
    }
    let summary = std::fs::read_to_string(dir.path().join("randomize.txt")).unwrap();
    let p: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("pvalue: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((1.0 / 26.0..=1.0).contains(&p));
}

#[test]
fn walkforward_tables_have_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example_config();
    let out = run(&["walkforward", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let per_window = std::fs::read_to_string(dir.path().join("per-window.csv")).unwrap();
    // hash line, header, three windows
    assert_eq!(per_window.lines().count(), 5);
    assert!(dir.path().join("config.toml").exists());
}

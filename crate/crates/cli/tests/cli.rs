//! End-to-end checks of the `savflow` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn savflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_savflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL_MBE: &str = r#"{
  "schema": 1,
  "experiment": "mbe",
  "seed": 3,
  "model": {"name": "mbe", "params": {"eta2": 0.1, "alpha": 0.05, "c0": 100.0}},
  "scheme": {"name": "bdf2"},
  "grid": {"points": [16, 16]},
  "time": {"dt": 0.01, "t_final": 0.5},
  "output": {"ledger_every": 5, "snapshot_times": [0.0, 0.5]},
  "initial": {"kind": "random", "amplitude": 0.1}
}"#;

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = savflow(&["validate", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        n += 1;
    }
    assert_eq!(n, 8);
}

#[test]
fn unknown_key_is_rejected_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = SMALL_MBE.replace("\"t_final\"", "\"t_finale\"");
    let p = write(tmp.path(), "bad.json", &bad);
    let out = savflow(&["validate", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("time.t_finale"), "{err}");
}

#[test]
fn missing_file_is_an_error() {
    let out = savflow(&["validate", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_is_byte_for_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "mbe.json", SMALL_MBE);
    let mut outputs = Vec::new();
    for label in ["a", "b"] {
        let dir = tmp.path().join(label);
        let out = savflow(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(dir);
    }
    for name in ["ledger.csv", "summary.txt", "config.json", "snapshot_t0.5.savf"] {
        let a = fs::read(outputs[0].join(name)).unwrap();
        let b = fs::read(outputs[1].join(name)).unwrap();
        assert!(!a.is_empty(), "{name} is empty");
        assert_eq!(a, b, "{name} differs between runs");
    }
    let ledger = fs::read_to_string(outputs[0].join("ledger.csv")).unwrap();
    assert_eq!(
        ledger.lines().next().unwrap(),
        "step,t,dt,E_original,E_modified,residual,mass,growth"
    );
    assert_eq!(ledger.lines().count(), 1 + 11);
}

#[test]
fn failed_threshold_exits_with_two() {
    // the stabilized comparator stays dissipative on this short run, so the
    // "energy eventually increases" check fails
    let cfg = r#"{
      "schema": 1,
      "experiment": "npfc-compare",
      "seed": 1,
      "model": {"name": "npfc", "params": {"eps": 0.025}},
      "grid": {"points": [16, 16], "lengths": [50.0, 50.0]},
      "time": {"dt": 1.0, "t_final": 20.0},
      "initial": {"kind": "square-lattice", "mean": 0.07, "amplitude": 0.5, "cells": 6, "width": 2.0}
    }"#;
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "npfc.json", cfg);
    let dir = tmp.path().join("out");
    let out = savflow(&["run", p.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.join("summary.txt")).unwrap();
    assert!(summary.ends_with("result: FAIL\n"), "{summary}");
    assert!(dir.join("runs/ssi/ledger.csv").exists());
}

#[test]
fn rates_reads_ledgers() {
    let cfg = r#"{
      "schema": 1,
      "experiment": "convergence",
      "model": {"name": "allen-cahn", "params": {"eps": 0.5}},
      "grid": {"points": [16, 16]},
      "time": {"t_final": 0.2},
      "output": {"ledger_every": 10},
      "initial": {"kind": "sine-product", "amplitude": 0.5},
      "study": {"schemes": ["bdf2"], "dts": [0.02, 0.01, 0.005, 0.0025], "reference_dt": 1e-4}
    }"#;
    let tmp = tempfile::tempdir().unwrap();
    let p = write(tmp.path(), "conv.json", cfg);
    let dir = tmp.path().join("out");
    let out = savflow(&["run", p.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("rates.csv").exists());
    let pattern = format!("{}/runs/*/ledger.csv", dir.display());
    let out = savflow(&["rates", &pattern]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("dt,error,slope"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    let slope: f64 = rows[2].split(',').nth(2).unwrap().parse().unwrap();
    assert!((1.0..3.0).contains(&slope), "{text}");
}

#[test]
fn rates_needs_enough_ledgers() {
    let tmp = tempfile::tempdir().unwrap();
    let pattern = format!("{}/*.csv", tmp.path().display());
    let out = savflow(&["rates", &pattern]);
    assert_eq!(out.status.code(), Some(1));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hybridsim")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn hybridsim(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn validate_flags_two_level_beyond_positivity_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"model": "two-level:G=1.2"}"#);
    let out = tmp.path().join("out");
    let o = hybridsim(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let v = read_json(&out.join("validation.json"));
    assert_eq!(v["psd_ok"], Value::Bool(false));
    assert_eq!(v["admissible"], Value::Bool(false));
    assert!(out.join("manifest.json").exists());

    let o = hybridsim(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--allow-inadmissible",
    ]);
    assert_eq!(o.status.code(), Some(0));

    let cfg = write_config(tmp.path(), "ok.json", r#"{"model": "two-level:G=1"}"#);
    let o = hybridsim(&[
        "validate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v = read_json(&out.join("validation.json"));
    assert_eq!(v["psd_ok"], Value::Bool(true));
    assert_eq!(v["monitoring_ok"], Value::Bool(true));
}

#[test]
fn same_config_and_seed_give_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"model": "two-level:G=0.5",
            "numerics": {"dt": 1e-3, "t_end": 0.05, "n_trajectories": 300, "master_seed": 11},
            "output": {"n_samples": 5, "record_trajectories": 2}}"#,
    );
    let run = |dir: &str, seed: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut args = vec![
            "unravel-diffusive",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let o = hybridsim(&args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        tree(&out)
    };
    let a = run("a", None);
    let b = run("b", None);
    assert_eq!(a, b);
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    for f in [
        "ensemble.jsonl",
        "final_state.json",
        "manifest.json",
        "summary.json",
        "trajectories.jsonl",
        "validation.json",
    ] {
        assert!(names.contains(&f), "missing {f}: {names:?}");
    }
    let c = run("c", Some("12"));
    assert_ne!(a, c);

    let manifest = read_json(&tmp.path().join("a/manifest.json"));
    assert_eq!(manifest["master_seed"], 11);
    assert_eq!(manifest["mode"], "unravel-diffusive");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let summary = read_json(&tmp.path().join("a/summary.json"));
    assert!(summary["final"]["mean_purity_se"].is_number());
    assert!(summary["max_deviation_vs_hme"].is_number());
}

#[test]
fn jump_summary_reports_deviation_from_the_master_equation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"model": "jump-chain", "numerics": {"dt": 1e-3, "t_end": 0.5, "n_trajectories": 1000, "master_seed": 5}}"#,
    );
    let out = tmp.path().join("out");
    let o = hybridsim(&[
        "unravel-jump",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = read_json(&out.join("summary.json"));
    assert!(s["max_deviation_vs_hme"].as_f64().unwrap() < 0.1);
    // Early rare events make the z statistic seed-dependent at this size.
    assert!(s["max_z_vs_hme"].as_f64().unwrap().is_finite());
    assert!(s["hme_trace_drift_max"].as_f64().unwrap() < 1e-8);
    assert_eq!(s["final"]["marginal_se"].as_array().unwrap().len(), 3);
}

#[test]
fn deterministic_modes_write_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "d.json",
        r#"{"model": "jump-chain", "numerics": {"dt": 1e-3, "t_end": 0.2}}"#,
    );
    let out = tmp.path().join("d");
    let o = hybridsim(&[
        "hme-discrete",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = read_json(&out.join("summary.json"));
    assert!(s["trace_drift_max"].as_f64().unwrap() < 1e-8);
    let lines = std::fs::read_to_string(out.join("series.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 11);

    let cfg = write_config(
        tmp.path(),
        "g.json",
        r#"{"model": "two-level:G=0.5", "numerics": {"dt": 1e-3, "t_end": 0.1}}"#,
    );
    let out = tmp.path().join("g");
    let o = hybridsim(&[
        "hme-grid",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = read_json(&out.join("summary.json"));
    assert!(s["trace_drift_max"].as_f64().unwrap() < 1e-6);
    assert!(s["max_bloch_length"].as_f64().unwrap() <= 1.0 + 1e-4);
}

#[test]
fn monitored_runs_replay_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "m.json",
        r#"{"model": "two-level:G=1", "numerics": {"dt": 1e-3, "t_end": 0.1, "n_trajectories": 50, "master_seed": 2}}"#,
    );
    let out = tmp.path().join("m");
    let o = hybridsim(&[
        "unravel-monitored",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let s = read_json(&out.join("summary.json"));
    assert_eq!(s["replay"]["bit_identical"], Value::Bool(true));
    assert_eq!(s["replay"]["max_deviation"].as_f64(), Some(0.0));

    // G = 0.5 with unit diffusion cannot be monitored.
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"model": "two-level:G=0.5", "numerics": {"dt": 1e-3, "t_end": 0.1, "n_trajectories": 5, "master_seed": 2}}"#,
    );
    let o = hybridsim(&[
        "unravel-monitored",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();

    let o = hybridsim(&[
        "hme-grid",
        "--config",
        tmp.path().join("missing.json").to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(4));

    let cfg = write_config(
        tmp.path(),
        "s.json",
        r#"{"model": "jump-chain", "numerics": {"dt": 1e-3, "t_end": 1}}"#,
    );
    let o = hybridsim(&[
        "unravel-jump",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/numerics/master_seed"), "{err}");
    assert!(err.contains("/numerics/n_trajectories"), "{err}");

    let cfg = write_config(
        tmp.path(),
        "m.json",
        r#"{"mode": "hme-grid", "model": "jump-chain"}"#,
    );
    let o = hybridsim(&[
        "hme-discrete",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(
        tmp.path(),
        "cfl.json",
        r#"{"model": "two-level:G=0.5", "numerics": {"dt": 0.1, "t_end": 0.5}}"#,
    );
    let o = hybridsim(&["hme-grid", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3));

    let o = hybridsim(&["frobnicate", "--config", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn model_files_are_resolved_next_to_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "model.json",
        r#"{"kind": "diffusive",
            "H": [[[0,0],[0,0]],[[0,0],[0,0]]],
            "generators": [[[[1,0],[0,0]],[[0,0],[-1,0]]]],
            "DQ": [[[1,0]]], "DC": [[1]], "G": [[[0.3,0]]], "V": [0]}"#,
    );
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"model": {"file": "model.json"},
            "numerics": {"dt": 1e-3, "t_end": 0.05, "n_trajectories": 20, "master_seed": 1},
            "initial": {"type": "point", "x": [0], "psi": [[1,0],[1,0]]}}"#,
    );
    let out = tmp.path().join("o");
    let o = hybridsim(&[
        "unravel-diffusive",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let s = read_json(&out.join("summary.json"));
    assert!(s["norm_defect_max"].as_f64().unwrap() < 1e-10);
    assert!(s.get("max_deviation_vs_hme").is_none());
}

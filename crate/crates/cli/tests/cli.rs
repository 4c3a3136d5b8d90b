use std::path::Path;
use std::process::{Command, Output};

use cadiff_core::evaluation::load_report;

fn cadiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadiff"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CADIFF_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = cadiff(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("error: kind=")).collect();
    assert_eq!(lines.len(), 1, "{text}");
    lines[0].to_string()
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cadiff(d, &["gen-data", "--problem", "tabletop", "--bogus", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=usage"));

    let out = cadiff(d, &["gen-data", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let out = cadiff(d, &["eval", "--samples", "missing.jsonl", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=io"));

    std::fs::write(d.join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = cadiff(d, &["gen-data", "--problem", "tabletop", "--config", "bad.toml", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("train.epoch"));
}

#[test]
fn pipeline_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "seed = 3\n[data]\nn_instances = 4\nsolves_per_instance = 4\n").unwrap();
    ok(d, &["gen-data", "--problem", "tabletop", "--config", "run.toml", "--out", "d.jsonl"]);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("d.jsonl.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["n_instances"], 4);
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("d.jsonl.run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["inputs"][0]["role"], "config");

    let dataset_before = std::fs::read(d.join("d.jsonl")).unwrap();
    ok(d, &["analyze-gt", "--dataset", "d.jsonl", "--n-noise", "4", "--m-data", "4", "--out", "gt.csv"]);
    assert_eq!(std::fs::read(d.join("d.jsonl")).unwrap(), dataset_before);

    let out = cadiff(d, &["train", "--dataset", "d.jsonl", "--mode", "constrained", "--out", "c.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("--gt-table"));
    let out = cadiff(d, &["train", "--dataset", "d.jsonl", "--mode", "vanilla", "--lambda", "0.5", "--out", "v.ckpt"]);
    assert_eq!(out.status.code(), Some(2));

    let quick = ["--epochs", "1", "--batch-size", "8"];
    let mut args = vec!["train", "--dataset", "d.jsonl", "--mode", "vanilla", "--out", "v.ckpt"];
    args.extend(quick);
    ok(d, &args);
    let mut args = vec!["train", "--dataset", "d.jsonl", "--mode", "constrained", "--gt-table", "gt.csv", "--out", "c.ckpt"];
    args.extend(quick);
    ok(d, &args);

    let out = cadiff(d, &["sample", "--checkpoint", "v.ckpt", "--problem", "two_car", "--out", "s.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("mismatch"));
    let mut cut = std::fs::read(d.join("v.ckpt")).unwrap();
    cut.truncate(cut.len() / 2);
    std::fs::write(d.join("cut.ckpt"), cut).unwrap();
    let out = cadiff(d, &["sample", "--checkpoint", "cut.ckpt", "--out", "s.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error: kind=incompatible"));

    let small = ["--n-instances", "2", "--per-instance", "3"];
    for (src, out) in [("v.ckpt", "sv.jsonl"), ("c.ckpt", "sc.jsonl")] {
        let mut args = vec!["sample", "--checkpoint", src, "--out", out];
        args.extend(small);
        ok(d, &args);
    }
    let mut args = vec!["sample", "--method", "uniform", "--problem", "tabletop", "--out", "su.jsonl"];
    args.extend(small);
    ok(d, &args);

    let samples = ["sv.jsonl", "sc.jsonl", "su.jsonl"];
    let mut args = vec!["eval", "--out", "ev.json", "--samples"];
    args.extend(samples);
    ok(d, &args);
    let mut args = vec!["warm-start", "--out", "ws.json", "--samples"];
    args.extend(samples);
    ok(d, &args);
    ok(d, &["report", "--inputs", "ev.json", "ws.json", "--gt-table", "gt.csv", "--out-dir", "rep"]);

    let report = load_report(&d.join("rep/report.json")).unwrap();
    let methods: Vec<&str> = report.seeds.iter().flat_map(|s| &s.methods).map(|m| m.method.as_str()).collect();
    for m in ["vanilla", "constrained", "uniform"] {
        assert!(methods.contains(&m), "{methods:?}");
    }
    for m in report.seeds.iter().flat_map(|s| &s.methods) {
        assert_eq!(m.sample.as_ref().unwrap().n, 6);
        assert_eq!(m.violations.len(), 6);
        assert!(m.warm_start.is_some());
    }
    let curve = std::fs::read_to_string(d.join("rep/gt_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 102);
    assert!(d.join("rep/histogram.csv").exists());
    assert!(d.join("rep/summary.txt").exists());
}

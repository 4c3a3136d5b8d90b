//! Sample quality (violation statistics, feasible ratio) and warm-start
//! benchmarking, plus the report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{violation, DecisionVector, ProblemParams};
use crate::solver::{solve_local, SolveConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub q25: f64,
    pub feasible_ratio: f64,
    pub n: usize,
}

/// Type-7 quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn mean_std(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = if sorted.len() > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregates violations. Sums run over the sorted values, so the result is
/// exactly permutation invariant.
pub fn metrics_from_violations(violations: &[f64], feas_tol: f64) -> Result<SampleMetrics> {
    if violations.is_empty() {
        return Err(Error::Config("no samples to aggregate".into()));
    }
    let s = sorted(violations);
    let (mean, std) = mean_std(&s);
    let feasible = s.iter().filter(|v| **v <= feas_tol).count();
    Ok(SampleMetrics {
        mean,
        std,
        q25: quantile_sorted(&s, 0.25),
        feasible_ratio: feasible as f64 / s.len() as f64,
        n: s.len(),
    })
}

/// Violation of each sample (normalized samples are denormalized first).
pub fn sample_violations(samples: &[DecisionVector], params: &[ProblemParams]) -> Result<Vec<f64>> {
    if samples.len() != params.len() {
        return Err(Error::Shape {
            expected: samples.len(),
            got: params.len(),
        });
    }
    samples
        .par_iter()
        .zip(params)
        .map(|(x, p)| {
            let phys = if x.normalized { x.denormalize(p.kind)? } else { x.clone() };
            Ok(violation(&phys, p)?.total)
        })
        .collect()
}

pub fn sample_metrics(samples: &[DecisionVector], params: &[ProblemParams], feas_tol: f64) -> Result<SampleMetrics> {
    metrics_from_violations(&sample_violations(samples, params)?, feas_tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartMetrics {
    /// Wall time over converged runs, seconds.
    pub mean_time: f64,
    pub std_time: f64,
    pub q25_time: f64,
    pub median_time: f64,
    /// Inner (line-search) iterations over converged runs.
    pub mean_iters: f64,
    pub median_iters: f64,
    pub median_outer_iters: f64,
    /// Converged runs.
    pub n: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartRun {
    pub converged: bool,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub wall_time: f64,
    pub objective: f64,
}

/// Solves from every guess and aggregates over the converged runs. Metrics
/// are zero when nothing converged.
pub fn warm_start_benchmark(
    guesses: &[DecisionVector],
    params: &[ProblemParams],
    cfg: &SolveConfig,
) -> Result<(WarmStartMetrics, Vec<WarmStartRun>)> {
    if guesses.len() != params.len() {
        return Err(Error::Shape {
            expected: guesses.len(),
            got: params.len(),
        });
    }
    let runs: Vec<WarmStartRun> = guesses
        .par_iter()
        .zip(params)
        .map(|(g, p)| {
            let r = solve_local(g, p, cfg)?;
            Ok(WarmStartRun {
                converged: r.converged,
                inner_iters: r.inner_iters_total,
                outer_iters: r.outer_iters,
                wall_time: r.wall_time,
                objective: r.objective,
            })
        })
        .collect::<Result<_>>()?;
    let ok: Vec<&WarmStartRun> = runs.iter().filter(|r| r.converged).collect();
    let n_failed = runs.len() - ok.len();
    if ok.is_empty() {
        let zero = WarmStartMetrics {
            mean_time: 0.0,
            std_time: 0.0,
            q25_time: 0.0,
            median_time: 0.0,
            mean_iters: 0.0,
            median_iters: 0.0,
            median_outer_iters: 0.0,
            n: 0,
            n_failed,
        };
        return Ok((zero, runs));
    }
    let times = sorted(&ok.iter().map(|r| r.wall_time).collect::<Vec<_>>());
    let iters = sorted(&ok.iter().map(|r| r.inner_iters as f64).collect::<Vec<_>>());
    let outer = sorted(&ok.iter().map(|r| r.outer_iters as f64).collect::<Vec<_>>());
    let (mean_time, std_time) = mean_std(&times);
    let metrics = WarmStartMetrics {
        mean_time,
        std_time,
        q25_time: quantile_sorted(&times, 0.25),
        median_time: quantile_sorted(&times, 0.5),
        mean_iters: mean_std(&iters).0,
        median_iters: quantile_sorted(&iters, 0.5),
        median_outer_iters: quantile_sorted(&outer, 0.5),
        n: ok.len(),
        n_failed,
    };
    Ok((metrics, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub sample: Option<SampleMetrics>,
    pub warm_start: Option<WarmStartMetrics>,
    /// Raw per-sample violations; stored in the CSV, not the JSON.
    #[serde(skip)]
    pub violations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub feas_tol: f64,
    /// Path of the ground-truth table used for training, if any.
    pub gt_table: Option<String>,
    pub seeds: Vec<SeedReport>,
}

pub fn violations_csv_path(report: &Path) -> PathBuf {
    report.with_extension("violations.csv")
}

const VIOLATION_HEADER: &str = "seed,method,index,violation";

/// Writes the JSON report and `<stem>.violations.csv` with one row per
/// sample.
pub fn emit_report(report: &Report, path: &Path) -> Result<()> {
    crate::persist::write_json(path, report)?;
    let mut csv = String::from(VIOLATION_HEADER);
    csv.push('\n');
    for s in &report.seeds {
        for m in &s.methods {
            for (i, v) in m.violations.iter().enumerate() {
                writeln!(csv, "{},{},{i},{v}", s.seed, m.method).expect("string write");
            }
        }
    }
    let csv_path = violations_csv_path(path);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
}

pub fn load_report(path: &Path) -> Result<Report> {
    let mut report: Report = crate::persist::read_json(path)?;
    let csv_path = violations_csv_path(path);
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(VIOLATION_HEADER) {
        return Err(Error::incompatible(&csv_path, "unexpected header"));
    }
    for (n, line) in lines.enumerate() {
        let bad = || Error::incompatible(&csv_path, format!("malformed row {}", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let seed: u64 = f[0].parse().map_err(|_| bad())?;
        let v: f64 = f[3].parse().map_err(|_| bad())?;
        let m = report
            .seeds
            .iter_mut()
            .find(|s| s.seed == seed)
            .and_then(|s| s.methods.iter_mut().find(|m| m.method == f[1]))
            .ok_or_else(bad)?;
        m.violations.push(v);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metrics_arithmetic() {
        let m = metrics_from_violations(&[3.0, 0.0, 2.0, 1.0], 1e-4).unwrap();
        assert_eq!(m.mean, 1.5);
        assert_eq!(m.q25, 0.75);
        assert_eq!(m.feasible_ratio, 0.25);
        assert_eq!(m.n, 4);
        let all = metrics_from_violations(&[0.0, 5e-5, 1e-4], 1e-4).unwrap();
        assert_eq!(all.feasible_ratio, 1.0);
        assert!(all.mean <= 1e-4);
        assert!(metrics_from_violations(&[], 1e-4).is_err());
    }

    proptest! {
        #[test]
        fn metrics_invariants(mut v in proptest::collection::vec(0.0f64..100.0, 1..60), seed in any::<u64>()) {
            let a = metrics_from_violations(&v, 1e-4).unwrap();
            let s = sorted(&v);
            prop_assert!(a.q25 <= quantile_sorted(&s, 0.5));
            prop_assert!((0.0..=1.0).contains(&a.feasible_ratio));
            let strict = metrics_from_violations(&v, 0.0).unwrap();
            prop_assert!(strict.feasible_ratio <= a.feasible_ratio);
            use rand::seq::SliceRandom;
            v.shuffle(&mut crate::rng::rng_for(seed, &[]));
            prop_assert_eq!(metrics_from_violations(&v, 1e-4).unwrap(), a);
        }
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let block = |seed: u64, shift: f64| SeedReport {
            seed,
            methods: vec![MethodReport {
                method: "vanilla".into(),
                sample: Some(metrics_from_violations(&[0.1 + shift, 0.7, 1.0 / 3.0], 1e-4).unwrap()),
                warm_start: None,
                violations: vec![0.1 + shift, 0.7, 1.0 / 3.0],
            }],
        };
        let report = Report {
            config_hash: "abc".into(),
            feas_tol: 1e-4,
            gt_table: None,
            seeds: vec![block(1, 0.0), block(2, 0.5)],
        };
        emit_report(&report, &path).unwrap();
        let back = load_report(&path).unwrap();
        assert_eq!(back, report);
        for s in &back.seeds {
            let m = &s.methods[0];
            assert_eq!(metrics_from_violations(&m.violations, back.feas_tol).unwrap(), *m.sample.as_ref().unwrap());
        }
        let rows = fs::read_to_string(violations_csv_path(&path)).unwrap().lines().count() - 1;
        assert_eq!(rows, 6);
    }
}

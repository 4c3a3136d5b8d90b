//! Training data: locally optimal solutions from random initial guesses,
//! filtered by an objective threshold and stored normalized.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{sample_problem_params, uniform_decision, Bounds, DecisionVector, ProblemKind, ProblemParams};
use crate::rng::{derive_seed, rng_for};
use crate::solver::{solve_local, SolveConfig};

/// One `(x*, y)` training pair. `x_star` is normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub kind: ProblemKind,
    pub params: ProblemParams,
    pub x_star: Vec<f64>,
    pub objective: f64,
    pub violation: f64,
    /// Seed the instance parameters were sampled from.
    pub source_seed: u64,
}

impl DatasetRecord {
    pub fn x_star(&self) -> DecisionVector {
        DecisionVector::normalized(self.x_star.clone())
    }

    pub fn x_star_physical(&self) -> Result<DecisionVector> {
        self.x_star().denormalize(self.kind)
    }
}

/// Objective cut-off for kept solutions, seconds.
pub fn objective_threshold(kind: ProblemKind) -> f64 {
    match kind {
        ProblemKind::Tabletop => 12.0,
        ProblemKind::TwoCar => 14.0,
    }
}

/// Seed of instance `i` under master `seed`.
pub fn instance_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, &[i as u64])
}

/// Solves `solves_per_instance` uniform initial guesses on each of
/// `n_instances` sampled instances and keeps the converged solutions under
/// the kind's objective threshold.
///
/// Instance `i` uses parameters sampled from `instance_seed(seed, i)` and
/// initial guess `j` is drawn from `rng_for(seed, [i, j])`, so the output is
/// independent of the worker count.
pub fn generate_dataset(
    kind: ProblemKind,
    n_instances: usize,
    solves_per_instance: usize,
    cfg: &SolveConfig,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if n_instances == 0 {
        return Err(Error::Config("n_instances must be at least 1".into()));
    }
    cfg.validate()?;
    let threshold = objective_threshold(kind);
    let per_instance: Vec<Result<Vec<DatasetRecord>>> = (0..n_instances)
        .into_par_iter()
        .map(|i| {
            let source_seed = instance_seed(seed, i);
            let params = sample_problem_params(source_seed, kind)?;
            let mut out = Vec::new();
            for j in 0..solves_per_instance {
                let x0 = uniform_decision(kind, &mut rng_for(seed, &[i as u64, j as u64]));
                let res = solve_local(&x0, &params, cfg)?;
                if !res.converged {
                    continue;
                }
                let (z, clamped) = res.x_star.normalize(kind)?;
                debug_assert!(!clamped, "solver iterates stay in the box");
                out.push(DatasetRecord {
                    kind,
                    params: params.clone(),
                    x_star: z.values,
                    objective: res.objective,
                    violation: res.violation,
                    source_seed,
                });
            }
            if out.is_empty() {
                log::warn!("instance {i} (seed {source_seed}) produced no converged solution; skipped");
            }
            Ok(filter_by_objective(out, threshold))
        })
        .collect();
    let mut records = Vec::new();
    for r in per_instance {
        records.extend(r?);
    }
    Ok(records)
}

/// Keeps records with `objective <= threshold`, preserving order.
pub fn filter_by_objective(records: Vec<DatasetRecord>, threshold: f64) -> Vec<DatasetRecord> {
    records.into_iter().filter(|r| r.objective <= threshold).collect()
}

/// Sidecar describing how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub kind: ProblemKind,
    pub n_instances: usize,
    pub solves_per_instance: usize,
    pub seed: u64,
    pub solve_config: SolveConfig,
    pub objective_threshold: f64,
    pub bounds: Bounds,
    pub n_records: usize,
    /// SHA-256 of the canonical JSON of the generating configuration.
    pub config_hash: String,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::incompatible(path, format!("line {}: {e}", n + 1)))?;
        if rec.x_star.len() != crate::problems::DECISION_DIM {
            return Err(Error::incompatible(
                path,
                format!("line {}: x_star has {} components", n + 1, rec.x_star.len()),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    crate::persist::write_json(&meta_path(path), meta)
}

pub fn load_meta(path: &Path) -> Result<DatasetMeta> {
    let meta: DatasetMeta = crate::persist::read_json(&meta_path(path))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::incompatible(
            meta_path(path),
            format!("dataset format version {} (expected {DATASET_FORMAT_VERSION})", meta.format_version),
        ));
    }
    Ok(meta)
}

/// Checks that every record belongs to `kind`.
pub fn check_kind(records: &[DatasetRecord], kind: ProblemKind) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.kind != kind || r.params.kind != kind) {
        return Err(Error::Config(format!(
            "dataset mixes problem kinds: found {} where {kind} was expected",
            r.kind
        )));
    }
    Ok(())
}

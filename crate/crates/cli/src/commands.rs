//! One function per subcommand. Each maps onto a library operation and
//! writes `<out>.run.json` beside its output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use cadiff_core::align::{compute_gt_violation_table, load_gt_table, save_gt_table, train_constrained, PER_SAMPLE_DRAWS};
use cadiff_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use cadiff_core::dataset::{
    generate_dataset, instance_seed, load_dataset, objective_threshold, save_dataset, save_meta, DatasetMeta,
    DATASET_FORMAT_VERSION,
};
use cadiff_core::denoiser::{train_vanilla, TrainConfig, TrainMode};
use cadiff_core::evaluation::{
    emit_report, load_report, metrics_from_violations, sample_violations, warm_start_benchmark, MethodReport,
    Report, SeedReport,
};
use cadiff_core::persist::{config_hash, write_json};
use cadiff_core::problems::{sample_problem_params, uniform_decision, DecisionVector, ProblemKind, ProblemParams};
use cadiff_core::rng::{derive_seed, rng_for};
use cadiff_core::Error;
use serde_json::{json, Value};

use crate::args::*;
use crate::config::{self, overrides, Override, RunConfig};
use crate::samples::{load_samples, save_samples, SampleRecord};
use crate::{run_json_path, InputFile, RunMetadata, UsageError};

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::AnalyzeGt(a) => analyze_gt(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::WarmStart(a) => warm_start(&a),
        Command::Report(a) => report(&a),
    }
}

fn num<T: Into<Value>>(v: Option<T>) -> Option<Value> {
    v.map(Into::into)
}

fn resolve(common: &Common, inferred: Option<ProblemKind>, mut flags: Vec<Override>) -> Result<RunConfig> {
    let file = common.config.as_deref().map(config::read_file).transpose()?;
    flags.extend(overrides([("seed", num(common.seed))]));
    config::resolve(common.problem, common.profile, file.as_ref(), inferred, &flags)
}

fn config_input(common: &Common) -> Result<Vec<InputFile>> {
    common.config.iter().map(|p| InputFile::hash("config", p)).collect()
}

fn write_run(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    effective: Value,
    inputs: Vec<InputFile>,
    outputs: &[PathBuf],
) -> Result<()> {
    let meta = RunMetadata {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: serde_json::to_value(cfg)?,
        config_hash: config_hash(cfg),
        effective,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&run_json_path(out), &meta)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = resolve(
        &a.common,
        None,
        overrides([
            ("data.n_instances", num(a.n_instances)),
            ("data.solves_per_instance", num(a.solves_per_instance)),
        ]),
    )?;
    let kind = cfg.problem;
    log::info!(
        "solving {} {kind} instances x {} initial guesses",
        cfg.data.n_instances,
        cfg.data.solves_per_instance
    );
    let records = generate_dataset(kind, cfg.data.n_instances, cfg.data.solves_per_instance, &cfg.solve, cfg.seed)?;
    save_dataset(&a.out, &records)?;
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        kind,
        n_instances: cfg.data.n_instances,
        solves_per_instance: cfg.data.solves_per_instance,
        seed: cfg.seed,
        solve_config: cfg.solve.clone(),
        objective_threshold: objective_threshold(kind),
        bounds: kind.bounds(),
        n_records: records.len(),
        config_hash: config_hash(&cfg),
    };
    save_meta(&a.out, &meta)?;
    log::info!("wrote {} records to {}", records.len(), a.out.display());
    let outputs = [a.out.clone(), cadiff_core::dataset::meta_path(&a.out)];
    write_run(&a.out, "gen-data", &cfg, json!({}), config_input(&a.common)?, &outputs)
}

fn analyze_gt(a: &AnalyzeGtArgs) -> Result<()> {
    let data = load_dataset(&a.dataset)?;
    let cfg = resolve(
        &a.common,
        data.first().map(|r| r.kind),
        overrides([("gt.n_noise", num(a.n_noise)), ("gt.m_data", num(a.m_data))]),
    )?;
    let sched = cfg.schedule.build()?;
    let table = compute_gt_violation_table(&data, &sched, cfg.gt.n_noise, cfg.gt.m_data, cfg.seed)?;
    save_gt_table(&a.out, &table)?;
    log::info!(
        "mean violation {:.3e} at k = 0, {:.3e} at k = {}",
        table.mean[0],
        table.mean[table.k_steps],
        table.k_steps
    );
    let mut inputs = config_input(&a.common)?;
    inputs.push(InputFile::hash("dataset", &a.dataset)?);
    let outputs = [a.out.clone(), cadiff_core::align::table_sidecar_path(&a.out)];
    write_run(&a.out, "analyze-gt", &cfg, json!({}), inputs, &outputs)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mode = match a.mode {
        ModeArg::Vanilla => TrainMode::Vanilla,
        ModeArg::Constrained => TrainMode::Constrained,
    };
    if mode == TrainMode::Constrained && a.gt_table.is_none() {
        return Err(UsageError("--mode constrained requires --gt-table".into()).into());
    }
    if mode == TrainMode::Vanilla && a.lambda.is_some_and(|l| l != 0.0) {
        return Err(Error::Config("vanilla mode requires lambda = 0".into()).into());
    }
    let data = load_dataset(&a.dataset)?;
    let reweighting = a.reweighting.map(|r| match r {
        ReweightingArg::PerStep => json!({"type": "per_step"}),
        ReweightingArg::PerSample => json!({"type": "per_sample", "n_draws": PER_SAMPLE_DRAWS}),
    });
    let cfg = resolve(
        &a.common,
        data.first().map(|r| r.kind),
        overrides([
            ("train.epochs", num(a.epochs)),
            ("train.batch_size", num(a.batch_size)),
            ("train.learning_rate", num(a.learning_rate)),
            ("train.lambda", num(a.lambda)),
            ("train.reweighting", reweighting),
        ]),
    )?;
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        p_uncond: cfg.guidance.p_uncond,
        seed: cfg.seed,
        lambda: if mode == TrainMode::Vanilla { 0.0 } else { cfg.train.lambda },
        mode,
        reweighting: cfg.train.reweighting,
        architecture: cfg.train.architecture.clone(),
    };
    tc.validate()?;
    let sched = cfg.schedule.build()?;
    let mut inputs = config_input(&a.common)?;
    inputs.push(InputFile::hash("dataset", &a.dataset)?);
    log::info!("training {mode:?} on {} records for {} epochs", data.len(), tc.epochs);
    let out = match (mode, &a.gt_table) {
        (TrainMode::Constrained, Some(path)) => {
            let gt = load_gt_table(path)?;
            inputs.push(InputFile::hash("gt_table", path)?);
            train_constrained(&data, &tc, &sched, &gt)?
        }
        _ => {
            if a.gt_table.is_some() {
                log::warn!("--gt-table is ignored in vanilla mode");
            }
            train_vanilla(&data, &tc, &sched)?
        }
    };
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        log::info!("loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    let header = CheckpointHeader {
        kind: cfg.problem,
        profile: tc.architecture.profile,
        architecture: tc.architecture.clone(),
        schedule: cfg.schedule,
        seed: tc.seed,
        mode,
        lambda: tc.lambda,
    };
    save_checkpoint(&a.out, &out.model, &header)?;
    let log_path = with_suffix(&a.out, ".log.json");
    write_json(&log_path, &out.log)?;
    let outputs = [a.out.clone(), cadiff_core::checkpoint::sidecar_path(&a.out), log_path];
    write_run(&a.out, "train", &cfg, serde_json::to_value(&tc)?, inputs, &outputs)
}

/// Held-out instance `i` of a run.
pub fn held_out_params(cfg: &RunConfig, i: usize) -> cadiff_core::Result<ProblemParams> {
    sample_problem_params(instance_seed(cfg.sample.instance_seed, i), cfg.problem)
}

fn sample(a: &SampleArgs) -> Result<()> {
    let loaded = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let cfg = resolve(
        &a.common,
        loaded.as_ref().map(|(_, h)| h.kind),
        overrides([
            ("sample.n_instances", num(a.n_instances)),
            ("sample.per_instance", num(a.per_instance)),
            ("sample.instance_seed", num(a.instance_seed)),
            ("guidance.omega", num(a.omega)),
        ]),
    )?;
    let mut inputs = config_input(&a.common)?;
    let mut records = Vec::new();
    let effective;
    for i in 0..cfg.sample.n_instances {
        let params = held_out_params(&cfg, i)?;
        let xs: Vec<DecisionVector> = match &loaded {
            Some((model, header)) => {
                let sched = header.schedule.build()?;
                let seed = derive_seed(cfg.seed, &[i as u64]);
                cadiff_core::diffusion::sample(model, &params, &cfg.guidance, &sched, cfg.sample.per_instance, seed)?
                    .iter()
                    .map(|z| z.denormalize(cfg.problem))
                    .collect::<cadiff_core::Result<_>>()?
            }
            None => (0..cfg.sample.per_instance)
                .map(|j| uniform_decision(cfg.problem, &mut rng_for(cfg.seed, &[i as u64, j as u64])))
                .collect(),
        };
        let (method, seed) = match &loaded {
            Some((_, h)) => (a.label.clone().unwrap_or_else(|| mode_name(h.mode).into()), h.seed),
            None => (a.label.clone().unwrap_or_else(|| "uniform".into()), cfg.seed),
        };
        records.extend(xs.into_iter().enumerate().map(|(j, x)| SampleRecord {
            method: method.clone(),
            seed,
            instance: i,
            index: j,
            params: params.clone(),
            x: x.values,
        }));
    }
    match &loaded {
        Some((_, header)) => {
            inputs.push(InputFile::hash("checkpoint", a.checkpoint.as_deref().expect("loaded"))?);
            effective = json!({"source": "checkpoint", "header": header});
        }
        None => effective = json!({"source": "uniform"}),
    }
    save_samples(&a.out, &records)?;
    log::info!("wrote {} samples to {}", records.len(), a.out.display());
    write_run(&a.out, "sample", &cfg, effective, inputs, std::slice::from_ref(&a.out))
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Vanilla => "vanilla",
        TrainMode::Constrained => "constrained",
    }
}

type Groups<'a> = Vec<((u64, String), Vec<&'a SampleRecord>)>;

/// Groups records by `(seed, method)` in order of first appearance.
fn group(records: &[SampleRecord]) -> Groups<'_> {
    let mut groups: Groups<'_> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(key, _)| key.0 == r.seed && key.1 == r.method) {
            Some((_, v)) => v.push(r),
            None => groups.push(((r.seed, r.method.clone()), vec![r])),
        }
    }
    groups
}

fn load_all_samples(paths: &[PathBuf]) -> Result<(Vec<SampleRecord>, Vec<InputFile>, Option<ProblemKind>)> {
    let mut records = Vec::new();
    let mut inputs = Vec::new();
    for p in paths {
        records.extend(load_samples(p)?);
        inputs.push(InputFile::hash("samples", p)?);
    }
    let kind = records.first().map(|r| r.params.kind);
    if let Some(k) = kind {
        if let Some(r) = records.iter().find(|r| r.params.kind != k) {
            return Err(Error::Config(format!("sample files mix {k} and {}", r.params.kind)).into());
        }
    }
    Ok((records, inputs, kind))
}

fn into_seed_blocks(methods: Vec<(u64, MethodReport)>) -> Vec<SeedReport> {
    let mut by_seed: BTreeMap<u64, Vec<MethodReport>> = BTreeMap::new();
    for (seed, m) in methods {
        by_seed.entry(seed).or_default().push(m);
    }
    by_seed.into_iter().map(|(seed, methods)| SeedReport { seed, methods }).collect()
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (records, mut inputs, kind) = load_all_samples(&a.samples)?;
    if records.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()).into());
    }
    let cfg = resolve(&a.common, kind, overrides([("feas_tol", num(a.feas_tol))]))?;
    inputs.splice(0..0, config_input(&a.common)?);
    if let Some(gt) = &a.gt_table {
        inputs.push(InputFile::hash("gt_table", gt)?);
    }
    let mut methods = Vec::new();
    for ((seed, method), recs) in group(&records) {
        let xs: Vec<DecisionVector> = recs.iter().map(|r| DecisionVector::physical(r.x.clone())).collect();
        let ps: Vec<ProblemParams> = recs.iter().map(|r| r.params.clone()).collect();
        let violations = sample_violations(&xs, &ps)?;
        let m = metrics_from_violations(&violations, cfg.feas_tol)?;
        log::info!(
            "seed {seed} {method}: mean {:.4} q25 {:.4} feasible {:.4} (n = {})",
            m.mean,
            m.q25,
            m.feasible_ratio,
            m.n
        );
        methods.push((
            seed,
            MethodReport {
                method,
                sample: Some(m),
                warm_start: None,
                violations,
            },
        ));
    }
    let report = Report {
        config_hash: config_hash(&cfg),
        feas_tol: cfg.feas_tol,
        gt_table: a.gt_table.as_ref().map(|p| p.display().to_string()),
        seeds: into_seed_blocks(methods),
    };
    emit_report(&report, &a.out)?;
    let outputs = [a.out.clone(), cadiff_core::evaluation::violations_csv_path(&a.out)];
    write_run(&a.out, "eval", &cfg, json!({}), inputs, &outputs)
}

fn warm_start(a: &WarmStartArgs) -> Result<()> {
    let (records, mut inputs, kind) = load_all_samples(&a.samples)?;
    if records.is_empty() {
        return Err(Error::Config("no samples to warm-start from".into()).into());
    }
    let cfg = resolve(&a.common, kind, Vec::new())?;
    inputs.splice(0..0, config_input(&a.common)?);
    let mut methods = Vec::new();
    let mut csv = String::from("seed,method,instance,index,converged,inner_iters,outer_iters,objective,wall_time\n");
    for ((seed, method), recs) in group(&records) {
        let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
        let chosen: Vec<&SampleRecord> = recs
            .into_iter()
            .filter(|r| {
                let n = taken.entry(r.instance).or_default();
                *n += 1;
                a.per_instance.is_none_or(|cap| *n <= cap)
            })
            .collect();
        let xs: Vec<DecisionVector> = chosen.iter().map(|r| DecisionVector::physical(r.x.clone())).collect();
        let ps: Vec<ProblemParams> = chosen.iter().map(|r| r.params.clone()).collect();
        let (m, runs) = warm_start_benchmark(&xs, &ps, &cfg.solve)?;
        log::info!(
            "seed {seed} {method}: median inner iterations {} ({} converged, {} failed)",
            m.median_iters,
            m.n,
            m.n_failed
        );
        for (r, run) in chosen.iter().zip(&runs) {
            writeln!(
                csv,
                "{seed},{method},{},{},{},{},{},{},{}",
                r.instance, r.index, run.converged, run.inner_iters, run.outer_iters, run.objective, run.wall_time
            )
            .expect("string write");
        }
        methods.push((
            seed,
            MethodReport {
                method,
                sample: None,
                warm_start: Some(m),
                violations: Vec::new(),
            },
        ));
    }
    let report = Report {
        config_hash: config_hash(&cfg),
        feas_tol: cfg.solve.feas_tol,
        gt_table: None,
        seeds: into_seed_blocks(methods),
    };
    emit_report(&report, &a.out)?;
    let runs_path = with_suffix(&a.out, ".runs.csv");
    fs::write(&runs_path, csv).map_err(|e| Error::Io {
        path: runs_path.clone(),
        source: e,
    })?;
    let outputs = [a.out.clone(), cadiff_core::evaluation::violations_csv_path(&a.out), runs_path];
    write_run(&a.out, "warm-start", &cfg, json!({"per_instance": a.per_instance}), inputs, &outputs)
}

/// Folds `other` into `into`, filling metrics a method does not have yet.
fn merge_reports(into: &mut Report, other: Report) {
    if into.config_hash != other.config_hash && !into.config_hash.contains(&other.config_hash) {
        into.config_hash = format!("{}+{}", into.config_hash, other.config_hash);
    }
    if into.gt_table.is_none() {
        into.gt_table = other.gt_table;
    }
    for block in other.seeds {
        let Some(target) = into.seeds.iter_mut().find(|s| s.seed == block.seed) else {
            into.seeds.push(block);
            continue;
        };
        for m in block.methods {
            match target.methods.iter_mut().find(|t| t.method == m.method) {
                Some(t) => {
                    t.sample = t.sample.take().or(m.sample);
                    t.warm_start = t.warm_start.take().or(m.warm_start);
                    if t.violations.is_empty() {
                        t.violations = m.violations;
                    }
                }
                None => target.methods.push(m),
            }
        }
    }
    into.seeds.sort_by_key(|s| s.seed);
}

/// Histogram edges: `[0, feas_tol]`, then decades up to `1e3`, then the rest.
fn histogram_edges(feas_tol: f64) -> Vec<f64> {
    let mut edges = vec![0.0, feas_tol];
    let mut e = 10f64.powf(feas_tol.log10().floor() + 1.0);
    while e <= 1e3 {
        edges.push(e);
        e *= 10.0;
    }
    edges.push(f64::INFINITY);
    edges
}

fn summary_table(report: &Report) -> String {
    let mut s = format!(
        "{:<6} {:<12} {:>22} {:>10} {:>9} {:>10} {:>10} {:>10}\n",
        "seed", "method", "mean (std)", "q25", "feasible", "med_iters", "med_outer", "med_time"
    );
    for block in &report.seeds {
        for m in &block.methods {
            let (ms, q, f) = match &m.sample {
                Some(x) => (
                    format!("{:.4} ({:.4})", x.mean, x.std),
                    format!("{:.4}", x.q25),
                    format!("{:.4}", x.feasible_ratio),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            let (it, outer, t) = match &m.warm_start {
                Some(w) => (
                    format!("{}", w.median_iters),
                    format!("{}", w.median_outer_iters),
                    format!("{:.4}", w.median_time),
                ),
                None => ("-".into(), "-".into(), "-".into()),
            };
            writeln!(s, "{:<6} {:<12} {ms:>22} {q:>10} {f:>9} {it:>10} {outer:>10} {t:>10}", block.seed, m.method)
                .expect("string write");
        }
    }
    s
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut merged: Option<Report> = None;
    let mut inputs = Vec::new();
    for p in &a.inputs {
        let r = load_report(p)?;
        inputs.push(InputFile::hash("report", p)?);
        match &mut merged {
            None => merged = Some(r),
            Some(m) => merge_reports(m, r),
        }
    }
    let merged = merged.ok_or_else(|| UsageError("no reports given".into()))?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = a.out_dir.join(name);
        fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    };
    let report_path = a.out_dir.join("report.json");
    emit_report(&merged, &report_path)?;
    let mut outputs = vec![report_path.clone(), cadiff_core::evaluation::violations_csv_path(&report_path)];

    let table = summary_table(&merged);
    print!("{table}");
    outputs.push(write("summary.txt", table)?);

    let edges = histogram_edges(merged.feas_tol);
    let mut hist = String::from("seed,method,bin_lo,bin_hi,count\n");
    for block in &merged.seeds {
        for m in block.methods.iter().filter(|m| !m.violations.is_empty()) {
            for w in edges.windows(2) {
                let first = w[0] == 0.0;
                let count = m
                    .violations
                    .iter()
                    .filter(|v| (first && **v >= w[0] || **v > w[0]) && **v <= w[1])
                    .count();
                writeln!(hist, "{},{},{},{},{count}", block.seed, m.method, w[0], w[1]).expect("string write");
            }
        }
    }
    outputs.push(write("histogram.csv", hist)?);

    if let Some(gt_path) = &a.gt_table {
        let gt = load_gt_table(gt_path)?;
        inputs.push(InputFile::hash("gt_table", gt_path)?);
        let mut curve = String::from("k,mean,ci95_lo,ci95_hi,denominator\n");
        for k in 0..=gt.k_steps {
            writeln!(
                curve,
                "{k},{},{},{},{}",
                gt.mean[k],
                gt.ci95_lo[k],
                gt.ci95_hi[k],
                gt.denominator(k)
            )
            .expect("string write");
        }
        outputs.push(write("gt_curve.csv", curve)?);
    }
    let meta = RunMetadata {
        command: "report".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: Value::Null,
        config_hash: merged.config_hash.clone(),
        effective: json!({}),
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&run_json_path(&report_path), &meta)?;
    Ok(())
}

//! Constraint alignment: per-step ground-truth violation statistics of
//! corrupted training data, the one-step-reverse violation loss, and the
//! hybrid loss that divides it by the ground-truth mean at the step of the
//! predicted sample.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetRecord;
use crate::denoiser::train::{check_draws, chunk_ranges, diffusion_loss, reduce_grads, BatchItem};
use crate::denoiser::{Denoiser, Objective, TrainConfig, TrainMode, TrainOutput};
use crate::diffusion::{forward_raw, reverse_coefficients, reverse_into, standard_normal_vec, NoisePredictor, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::problems::{
    denormalize_slice, normalization_scale, violation_and_gradient_raw, violation_raw, ProblemKind, ProblemParams,
    DECISION_DIM,
};
use crate::rng::rng_for;

/// Floor on the re-weighting denominator.
pub const EPSILON_FLOOR: f64 = 1e-3;

/// Forward draws per item in per-sample re-weighting.
pub const PER_SAMPLE_DRAWS: usize = 8;

/// How the violation term is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Reweighting {
    /// Dataset-level mean `mu(k - 1)` from the ground-truth table.
    PerStep,
    /// Mean violation of `n_draws` fresh corruptions of the item's own
    /// `x0` at step `k - 1`.
    PerSample { n_draws: usize },
}

/// Mean, spread and 95% interval of the violation of forward-corrupted
/// training data at every step `k = 0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtViolationTable {
    pub kind: ProblemKind,
    pub k_steps: usize,
    pub schedule: ScheduleParams,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub ci95_lo: Vec<f64>,
    pub ci95_hi: Vec<f64>,
    pub n_noise: usize,
    pub m_data: usize,
    pub seed: u64,
    pub epsilon_floor: f64,
}

impl GtViolationTable {
    /// `max(mean[k], epsilon_floor)`.
    pub fn denominator(&self, k: usize) -> f64 {
        self.mean[k].max(self.epsilon_floor)
    }

    pub fn check_compatible(&self, kind: ProblemKind, sched: &NoiseSchedule) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "ground-truth table is for {} but the data is {kind}",
                self.kind
            )));
        }
        if self.k_steps != sched.k_steps() || self.mean.len() != sched.k_steps() + 1 {
            return Err(Error::Config(format!(
                "ground-truth table has K = {} but the schedule has K = {}",
                self.k_steps,
                sched.k_steps()
            )));
        }
        Ok(())
    }
}

const STREAM_SELECT: u64 = 11;
const STREAM_CORRUPT: u64 = 12;

/// Running `(count, mean, M2)`, combined with Chan's formula.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let m2 = values.iter().map(|v| (v - mean).powi(2)).sum();
        Self { n, mean, m2 }
    }

    fn merge(self, o: Self) -> Self {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Self {
            n,
            mean: self.mean + delta * o.n / n,
            m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n,
        }
    }
}

/// Draws `m` records (with replacement only when the dataset is smaller)
/// and corrupts each `n` times at every step.
///
/// The draws for record slot `i` at step `k` come from a generator derived
/// from `(seed, i, k)`; statistics are merged in slot order, so the table
/// does not depend on the worker count.
pub fn compute_gt_violation_table(
    dataset: &[DatasetRecord],
    sched: &NoiseSchedule,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<GtViolationTable> {
    let Some(first) = dataset.first() else {
        return Err(Error::Config("ground-truth analysis needs a non-empty dataset".into()));
    };
    if n == 0 || m == 0 {
        return Err(Error::Config("N and M must be at least 1".into()));
    }
    let kind = first.kind;
    crate::dataset::check_kind(dataset, kind)?;
    let mut rng = rng_for(seed, &[STREAM_SELECT]);
    let picks: Vec<usize> = if dataset.len() >= m {
        rand::seq::index::sample(&mut rng, dataset.len(), m).into_vec()
    } else {
        (0..m).map(|_| rng.random_range(0..dataset.len())).collect()
    };
    let k_steps = sched.k_steps();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..=k_steps).map(move |k| (i, k))).collect();
    let cells: Vec<Moments> = pairs
        .par_iter()
        .map(|&(slot, k)| {
            let rec = &dataset[picks[slot]];
            let mut r = rng_for(seed, &[STREAM_CORRUPT, slot as u64, k as u64]);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let eps = standard_normal_vec(&mut r, DECISION_DIM);
                    let xk = forward_raw(&rec.x_star, k, &eps, sched);
                    violation_raw(&rec.params, &denormalize_slice(kind, &xk))
                })
                .collect();
            Moments::of(&values)
        })
        .collect();
    let mut per_k = vec![Moments::default(); k_steps + 1];
    for (&(_, k), c) in pairs.iter().zip(&cells) {
        per_k[k] = per_k[k].merge(*c);
    }
    let total = (n * m) as f64;
    let mean: Vec<f64> = per_k.iter().map(|c| c.mean).collect();
    let std: Vec<f64> = per_k
        .iter()
        .map(|c| if total > 1.0 { (c.m2 / (total - 1.0)).sqrt() } else { 0.0 })
        .collect();
    let half: Vec<f64> = std.iter().map(|s| 1.96 * s / total.sqrt()).collect();
    Ok(GtViolationTable {
        kind,
        k_steps,
        schedule: sched.params,
        ci95_lo: mean.iter().zip(&half).map(|(a, h)| a - h).collect(),
        ci95_hi: mean.iter().zip(&half).map(|(a, h)| a + h).collect(),
        mean,
        std,
        n_noise: n,
        m_data: m,
        seed,
        epsilon_floor: EPSILON_FLOOR,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableSidecar {
    format_version: u32,
    kind: ProblemKind,
    #[serde(rename = "K")]
    k_steps: usize,
    #[serde(rename = "N")]
    n_noise: usize,
    #[serde(rename = "M")]
    m_data: usize,
    seed: u64,
    epsilon_floor: f64,
    schedule: ScheduleParams,
}

const TABLE_FORMAT_VERSION: u32 = 1;
const CSV_HEADER: &str = "k,mean,std,ci95_lo,ci95_hi";

pub fn table_sidecar_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the CSV table and its JSON sidecar (`<path>.json`).
pub fn save_gt_table(path: &Path, table: &GtViolationTable) -> Result<()> {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for k in 0..=table.k_steps {
        writeln!(
            csv,
            "{k},{},{},{},{}",
            table.mean[k], table.std[k], table.ci95_lo[k], table.ci95_hi[k]
        )
        .expect("string write");
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    let side = TableSidecar {
        format_version: TABLE_FORMAT_VERSION,
        kind: table.kind,
        k_steps: table.k_steps,
        n_noise: table.n_noise,
        m_data: table.m_data,
        seed: table.seed,
        epsilon_floor: table.epsilon_floor,
        schedule: table.schedule,
    };
    crate::persist::write_json(&table_sidecar_path(path), &side)
}

pub fn load_gt_table(path: &Path) -> Result<GtViolationTable> {
    let side_path = table_sidecar_path(path);
    let side: TableSidecar = crate::persist::read_json(&side_path)?;
    if side.format_version != TABLE_FORMAT_VERSION {
        return Err(Error::incompatible(&side_path, format!("format version {}", side.format_version)));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::incompatible(path, "missing or unexpected CSV header"));
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::incompatible(path, format!("malformed row {}", row + 1));
        if fields.len() != 5 || fields[0].parse::<usize>().ok() != Some(row) {
            return Err(bad());
        }
        for (c, f) in cols.iter_mut().zip(&fields[1..]) {
            c.push(f.parse().map_err(|_| bad())?);
        }
    }
    if cols[0].len() != side.k_steps + 1 {
        return Err(Error::incompatible(
            path,
            format!("{} rows for K = {}", cols[0].len(), side.k_steps),
        ));
    }
    let [mean, std, ci95_lo, ci95_hi] = cols;
    Ok(GtViolationTable {
        kind: side.kind,
        k_steps: side.k_steps,
        schedule: side.schedule,
        mean,
        std,
        ci95_lo,
        ci95_hi,
        n_noise: side.n_noise,
        m_data: side.m_data,
        seed: side.seed,
        epsilon_floor: side.epsilon_floor,
    })
}

/// `x~_{k-1}`: one reverse step with the conditional noise only, clamped to
/// `[-1, 1]`.
pub fn one_step_reverse_conditional<M: NoisePredictor + ?Sized>(
    x_k: &[f64],
    k: usize,
    model: &M,
    condition: &ProblemParams,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if model.kind() != condition.kind {
        return Err(Error::Config("model and condition kinds differ".into()));
    }
    let eps_hat = model.predict(x_k, 1, k, Some(condition))?;
    let mut out = crate::diffusion::reverse_step(x_k, k, &eps_hat, z, sched)?;
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationLossOutput {
    /// Mean of `per_item`.
    pub value: f64,
    /// `V(x~_{k-1}, y)` per item, physical space.
    pub per_item: Vec<f64>,
    /// The one-step samples (normalized), row-major.
    pub samples: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Violation of the one-step reverse sample for every item.
///
/// `item_weights[i]` multiplies item `i` in the returned gradient, which is
/// that of `sum_i w_i V_i`. Gradients flow only through the model output;
/// `x_k` and `z` are data, and clamped components pass no gradient.
fn violation_pass(
    model: &Denoiser,
    batch: &[BatchItem<'_>],
    draws: &crate::denoiser::LossDraws,
    sched: &NoiseSchedule,
    item_weights: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    check_draws(batch, draws, sched)?;
    let kind = model.kind();
    let scale = normalization_scale(kind);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)>> = chunk_ranges(batch.len())
        .into_par_iter()
        .map(|(lo, hi)| {
            let rows = hi - lo;
            let mut x = Vec::with_capacity(rows * DECISION_DIM);
            let mut conds = Vec::with_capacity(rows);
            for i in lo..hi {
                x.extend(forward_raw(batch[i].0, draws.k[i], draws.eps_row(i), sched));
                conds.push(Some(batch[i].1));
            }
            let ks = &draws.k[lo..hi];
            model.check_batch(&x, ks, &conds)?;
            let (out, cache) = model.forward_cached(&x, ks, &conds);
            let mut values = Vec::with_capacity(rows);
            let mut samples = vec![0.0; rows * DECISION_DIM];
            let mut d_out = Array2::<f64>::zeros((rows, DECISION_DIM));
            for r in 0..rows {
                let i = lo + r;
                let row = r * DECISION_DIM..(r + 1) * DECISION_DIM;
                let eps_hat = out.row(r).to_vec();
                let pre = &mut samples[row.clone()];
                reverse_into(&x[row.clone()], ks[r], &eps_hat, draws.z_row(i), sched, pre);
                let inside: Vec<bool> = pre.iter().map(|v| *v > -1.0 && *v < 1.0).collect();
                for v in pre.iter_mut() {
                    *v = v.clamp(-1.0, 1.0);
                }
                let phys = denormalize_slice(kind, pre);
                let (v, g) = violation_and_gradient_raw(batch[i].1, &phys);
                if !v.is_finite() {
                    return Err(Error::NumericInput(format!(
                        "violation of batch item {i} (k = {}) is not finite",
                        ks[r]
                    )));
                }
                values.push(v);
                if let Some(w) = item_weights {
                    let (inv_sqrt_alpha, eps_coef, _) = reverse_coefficients(ks[r], sched);
                    let chain = -inv_sqrt_alpha * eps_coef * w[i];
                    for j in 0..DECISION_DIM {
                        if inside[j] {
                            d_out[[r, j]] = chain * scale[j] * g[j];
                        }
                    }
                }
            }
            let grad = item_weights.map(|_| {
                let mut g = vec![0.0; model.n_params()];
                model.backward(&cache, &d_out, &mut g);
                g
            });
            Ok((values, samples, grad))
        })
        .collect();
    let mut values = Vec::with_capacity(batch.len());
    let mut samples = Vec::with_capacity(batch.len() * DECISION_DIM);
    let mut grads = Vec::new();
    for p in parts {
        let (v, s, g) = p?;
        values.extend(v);
        samples.extend(s);
        grads.extend(g);
    }
    let grad = item_weights.map(|_| reduce_grads(model.n_params(), grads));
    Ok((values, samples, grad))
}

/// Batch-mean violation of the conditional one-step reverse samples.
pub fn violation_loss(
    model: &Denoiser,
    batch: &[BatchItem<'_>],
    draws: &crate::denoiser::LossDraws,
    sched: &NoiseSchedule,
    with_grad: bool,
) -> Result<ViolationLossOutput> {
    let w = vec![1.0 / batch.len().max(1) as f64; batch.len()];
    let (per_item, samples, grad) = violation_pass(model, batch, draws, sched, with_grad.then_some(w.as_slice()))?;
    Ok(ViolationLossOutput {
        value: per_item.iter().sum::<f64>() / per_item.len() as f64,
        per_item,
        samples,
        grad,
    })
}

/// Raw violation at step `k` divided by the ground-truth denominator at the
/// step of the predicted sample, `k - 1`.
pub fn weighted_violation(raw: f64, k: usize, gt: &GtViolationTable) -> f64 {
    raw / gt.denominator(k - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput {
    /// `diffusion + lambda * violation`.
    pub total: f64,
    pub diffusion: f64,
    /// Batch mean of the re-weighted violation.
    pub violation: f64,
    /// Per-item re-weighted violation.
    pub per_item: Vec<f64>,
    pub denominators: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Per-item denominators for the chosen re-weighting.
fn denominators(
    batch: &[BatchItem<'_>],
    draws: &crate::denoiser::LossDraws,
    sched: &NoiseSchedule,
    gt: &GtViolationTable,
    reweighting: Reweighting,
) -> Result<Vec<f64>> {
    match reweighting {
        Reweighting::PerStep => Ok(draws.k.iter().map(|&k| gt.denominator(k - 1)).collect()),
        Reweighting::PerSample { n_draws } => {
            if n_draws == 0 || draws.n_reweight != n_draws {
                return Err(Error::Config(format!(
                    "per-sample re-weighting needs {n_draws} draws per item, got {}",
                    draws.n_reweight
                )));
            }
            Ok(batch
                .par_iter()
                .enumerate()
                .map(|(i, (x0, params))| {
                    let k = draws.k[i] - 1;
                    let sum: f64 = (0..n_draws)
                        .map(|j| {
                            let o = (i * n_draws + j) * DECISION_DIM;
                            let eps = &draws.reweight_eps[o..o + DECISION_DIM];
                            let xk = forward_raw(x0, k, eps, sched);
                            violation_raw(params, &denormalize_slice(params.kind, &xk))
                        })
                        .sum();
                    (sum / n_draws as f64).max(gt.epsilon_floor)
                })
                .collect())
        }
    }
}

/// `L_diff + lambda * mean_i[V_i / max(mu(k_i - 1), floor)]`.
///
/// The two terms are differentiated separately and combined as
/// `g_diff + lambda * g_vio`; the diffusion term consumes exactly the draws
/// that [`diffusion_loss`] would.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss(
    model: &Denoiser,
    batch: &[BatchItem<'_>],
    draws: &crate::denoiser::LossDraws,
    sched: &NoiseSchedule,
    gt: &GtViolationTable,
    lambda: f64,
    reweighting: Reweighting,
    with_grad: bool,
) -> Result<HybridOutput> {
    gt.check_compatible(model.kind(), sched)?;
    let diff = diffusion_loss(model, batch, draws, sched, with_grad)?;
    let denoms = denominators(batch, draws, sched, gt, reweighting)?;
    let n = batch.len() as f64;
    let weights: Vec<f64> = denoms.iter().map(|d| 1.0 / (n * d)).collect();
    let (raw, _, g_vio) = violation_pass(model, batch, draws, sched, with_grad.then_some(weights.as_slice()))?;
    let per_item: Vec<f64> = raw.iter().zip(&denoms).map(|(v, d)| v / d).collect();
    let violation = per_item.iter().sum::<f64>() / n;
    let grad = match (diff.grad, g_vio) {
        (Some(gd), Some(gv)) => Some(gd.iter().zip(&gv).map(|(a, b)| a + lambda * b).collect()),
        _ => None,
    };
    Ok(HybridOutput {
        total: diff.value + lambda * violation,
        diffusion: diff.value,
        violation,
        per_item,
        denominators: denoms,
        grad,
    })
}

/// Trains with the hybrid loss. Requires `mode = constrained` and
/// `lambda > 0`.
pub fn train_constrained(
    dataset: &[DatasetRecord],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    gt: &GtViolationTable,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Constrained {
        return Err(Error::Config("train_constrained needs mode = constrained".into()));
    }
    crate::denoiser::train_with_objective(
        dataset,
        cfg,
        sched,
        Objective::Hybrid {
            gt,
            lambda: cfg.lambda,
            reweighting: cfg.reweighting,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ArchProfile, Architecture, LossDraws};
    use crate::diffusion::make_schedule;
    use crate::problems::{sample_problem_params, violation, DecisionVector};

    fn tiny_arch() -> Architecture {
        Architecture {
            profile: ArchProfile::Desk,
            time_embed_dim: 8,
            cond_widths: vec![16, 16],
            trunk_widths: vec![32, 32],
        }
    }

    fn feasible_record() -> DatasetRecord {
        // dt = 5/80 = 1/16 keeps the rollout exact: 64 unit steps reach (4, 4).
        let mut controls = vec![1.0; 128];
        controls.extend([0.0; 32]);
        let x = DecisionVector::from_parts(5.0, &controls);
        let params = ProblemParams {
            kind: ProblemKind::Tabletop,
            goals: vec![[4.0, 4.0]],
            obstacle_centers: vec![[-3.0, 3.0], [3.0, -3.0], [-3.0, -3.0], [-2.5, 2.0]],
            obstacle_radii: vec![0.5, 0.5, 0.5, 0.5],
        };
        assert_eq!(violation(&x, &params).unwrap().total, 0.0);
        let (z, _) = x.normalize(ProblemKind::Tabletop).unwrap();
        DatasetRecord {
            kind: ProblemKind::Tabletop,
            params,
            x_star: z.values,
            objective: 8.0,
            violation: 0.0,
            source_seed: 0,
        }
    }

    fn set_output_bias(model: &mut Denoiser, bias: &[f64]) {
        let spec = model.tensor_specs().iter().find(|s| s.name == "out.bias").unwrap().clone();
        model.params_mut()[spec.offset..spec.offset + spec.len()].copy_from_slice(bias);
    }

    #[test]
    fn table_basics_and_round_trip() {
        let sched = make_schedule(20, 5e-4, 0.2).unwrap();
        let data = vec![feasible_record()];
        let t = compute_gt_violation_table(&data, &sched, 10, 4, 3).unwrap();
        assert_eq!(t.mean.len(), 21);
        assert!(t.mean[0] <= 1e-4);
        assert!(t.mean.iter().all(|m| *m >= 0.0));
        assert!(t.mean[20] > t.mean[1]);
        assert_eq!(t, compute_gt_violation_table(&data, &sched, 10, 4, 3).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        save_gt_table(&p, &t).unwrap();
        let back = load_gt_table(&p).unwrap();
        assert_eq!(back, t);
        let p2 = dir.path().join("gt2.csv");
        save_gt_table(&p2, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
        fs::write(&p, "k,mean\n0,1\n").unwrap();
        assert!(matches!(load_gt_table(&p), Err(Error::Incompatible { .. })));
        assert!(compute_gt_violation_table(&[], &sched, 10, 4, 3).is_err());
    }

    #[test]
    fn exact_noise_recovers_x0_at_step_one() {
        let sched = make_schedule(50, 1e-4, 0.02).unwrap();
        let rec = feasible_record();
        let mut rng = rng_for(2, &[]);
        let eps = standard_normal_vec(&mut rng, DECISION_DIM);
        let x1 = forward_raw(&rec.x_star, 1, &eps, &sched);
        let mut model = Denoiser::new(ProblemKind::Tabletop, tiny_arch(), 0).unwrap();
        set_output_bias(&mut model, &eps);
        let zero = vec![0.0; DECISION_DIM];
        let out = one_step_reverse_conditional(&x1, 1, &model, &rec.params, &zero, &sched).unwrap();
        for (a, b) in out.iter().zip(&rec.x_star) {
            assert!((a - b).abs() < 1e-6);
        }
        set_output_bias(&mut model, &vec![-1e3; DECISION_DIM]);
        let big = one_step_reverse_conditional(&x1, 1, &model, &rec.params, &zero, &sched).unwrap();
        assert!(big.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn violation_loss_matches_problem_module() {
        let sched = make_schedule(30, 1e-3, 0.2).unwrap();
        let mut model = Denoiser::new(ProblemKind::Tabletop, tiny_arch(), 1).unwrap();
        let mut rng = rng_for(3, &[]);
        for v in model.params_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let recs: Vec<DatasetRecord> = (0..5)
            .map(|s| {
                let mut r = feasible_record();
                r.params = sample_problem_params(s, ProblemKind::Tabletop).unwrap();
                r
            })
            .collect();
        let batch: Vec<BatchItem<'_>> = recs.iter().map(|r| (r.x_star.as_slice(), &r.params)).collect();
        let draws = LossDraws::sample(5, 30, 0.0, 0, &mut rng_for(4, &[]), &mut rng_for(5, &[]));
        let out = violation_loss(&model, &batch, &draws, &sched, false).unwrap();
        for i in 0..5 {
            let xk = forward_raw(batch[i].0, draws.k[i], draws.eps_row(i), &sched);
            let xt = one_step_reverse_conditional(&xk, draws.k[i], &model, batch[i].1, draws.z_row(i), &sched).unwrap();
            let phys = DecisionVector::normalized(xt).denormalize(ProblemKind::Tabletop).unwrap();
            let v = violation(&phys, batch[i].1).unwrap().total;
            assert_eq!(out.per_item[i], v);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn stub_landing_on_feasible_point_gives_zero_loss_and_gradient() {
        let sched = make_schedule(30, 1e-3, 0.2).unwrap();
        let rec = feasible_record();
        let draws = LossDraws::sample(1, 30, 0.0, 0, &mut rng_for(6, &[]), &mut rng_for(7, &[]));
        let k = draws.k[0];
        let xk = forward_raw(&rec.x_star, k, draws.eps_row(0), &sched);
        let (inv_sqrt_alpha, c, sigma) = reverse_coefficients(k, &sched);
        // Solve the reverse step for the noise that lands on x0.
        let eps_hat: Vec<f64> = (0..DECISION_DIM)
            .map(|j| (xk[j] - (rec.x_star[j] - sigma * draws.z_row(0)[j]) / inv_sqrt_alpha) / c)
            .collect();
        let mut model = Denoiser::new(ProblemKind::Tabletop, tiny_arch(), 2).unwrap();
        set_output_bias(&mut model, &eps_hat);
        let batch = [(rec.x_star.as_slice(), &rec.params)];
        let out = violation_loss(&model, &batch, &draws, &sched, true).unwrap();
        assert!(out.value < 1e-9, "{}", out.value);
        assert!(out.grad.unwrap().iter().all(|g| *g == 0.0));
    }

    fn synthetic_table(kind: ProblemKind, sched: &NoiseSchedule) -> GtViolationTable {
        let k = sched.k_steps();
        let mean: Vec<f64> = (0..=k).map(|i| 0.5 * i as f64).collect();
        GtViolationTable {
            kind,
            k_steps: k,
            schedule: sched.params,
            std: vec![0.0; k + 1],
            ci95_lo: mean.clone(),
            ci95_hi: mean.clone(),
            mean,
            n_noise: 1,
            m_data: 1,
            seed: 0,
            epsilon_floor: EPSILON_FLOOR,
        }
    }

    #[test]
    fn hybrid_loss_degenerate_and_linear_in_lambda() {
        let sched = make_schedule(30, 1e-3, 0.2).unwrap();
        let mut model = Denoiser::new(ProblemKind::Tabletop, tiny_arch(), 3).unwrap();
        let mut rng = rng_for(8, &[]);
        for v in model.params_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let recs: Vec<DatasetRecord> = (0..40)
            .map(|s| {
                let mut r = feasible_record();
                r.params = sample_problem_params(s, ProblemKind::Tabletop).unwrap();
                r
            })
            .collect();
        let batch: Vec<BatchItem<'_>> = recs.iter().map(|r| (r.x_star.as_slice(), &r.params)).collect();
        let draws = LossDraws::sample(40, 30, 0.2, 0, &mut rng_for(9, &[]), &mut rng_for(10, &[]));
        let gt = synthetic_table(ProblemKind::Tabletop, &sched);
        let plain = diffusion_loss(&model, &batch, &draws, &sched, true).unwrap();
        let h0 = hybrid_loss(&model, &batch, &draws, &sched, &gt, 0.0, Reweighting::PerStep, true).unwrap();
        assert_eq!(h0.total.to_bits(), plain.value.to_bits());
        assert_eq!(h0.grad, plain.grad);
        let h1 = hybrid_loss(&model, &batch, &draws, &sched, &gt, 0.3, Reweighting::PerStep, false).unwrap();
        let h2 = hybrid_loss(&model, &batch, &draws, &sched, &gt, 0.6, Reweighting::PerStep, false).unwrap();
        let (d1, d2) = (h1.total - h1.diffusion, h2.total - h2.diffusion);
        assert!((d2 - 2.0 * d1).abs() <= 1e-12 * d2.abs().max(1.0));
        // Same raw violation weighs more at a small step than at a large one.
        assert!(weighted_violation(2.0, 3, &gt) > weighted_violation(2.0, 25, &gt));
        let other = synthetic_table(ProblemKind::TwoCar, &sched);
        assert!(hybrid_loss(&model, &batch, &draws, &sched, &other, 0.1, Reweighting::PerStep, false).is_err());
    }

    #[test]
    fn violation_gradient_matches_finite_differences() {
        let sched = make_schedule(30, 1e-3, 0.2).unwrap();
        let mut model = Denoiser::new(ProblemKind::TwoCar, tiny_arch(), 4).unwrap();
        let mut rng = rng_for(11, &[]);
        for v in model.params_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
        let recs: Vec<DatasetRecord> = (0..6)
            .map(|s| {
                let params = sample_problem_params(s, ProblemKind::TwoCar).unwrap();
                DatasetRecord {
                    kind: ProblemKind::TwoCar,
                    params,
                    x_star: (0..DECISION_DIM).map(|_| rng.random_range(-0.5..0.5)).collect(),
                    objective: 6.0,
                    violation: 0.0,
                    source_seed: s,
                }
            })
            .collect();
        let batch: Vec<BatchItem<'_>> = recs.iter().map(|r| (r.x_star.as_slice(), &r.params)).collect();
        let mut draws = LossDraws::sample(6, 30, 0.0, 0, &mut rng_for(12, &[]), &mut rng_for(13, &[]));
        // Small steps and damped noise keep x~ away from the clamp.
        for k in &mut draws.k {
            *k = (*k % 5) + 2;
        }
        for v in draws.z.iter_mut().chain(draws.eps.iter_mut()) {
            *v *= 0.2;
        }
        let grad = violation_loss(&model, &batch, &draws, &sched, true).unwrap().grad.unwrap();
        let out = violation_loss(&model, &batch, &draws, &sched, false).unwrap();
        assert!(out.samples.iter().all(|v| v.abs() < 1.0));
        let h = 1e-4;
        let mut checked = 0;
        while checked < 20 {
            let i = rng.random_range(0..model.n_params());
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = violation_loss(&model, &batch, &draws, &sched, false).unwrap().value;
            model.params_mut()[i] = orig - h;
            let down = violation_loss(&model, &batch, &draws, &sched, false).unwrap().value;
            model.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            if fd.abs().max(grad[i].abs()) < 1e-8 {
                continue;
            }
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(err < 1e-3, "param {i}: fd {fd} vs {}", grad[i]);
            checked += 1;
        }
    }
}

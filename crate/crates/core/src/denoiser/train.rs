//! The noise-prediction loss and the shared mini-batch training loop.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, Architecture, Denoiser};
use crate::align::{hybrid_loss, GtViolationTable, Reweighting};
use crate::dataset::{check_kind, DatasetRecord};
use crate::diffusion::{forward_raw, standard_normal_vec, NoiseSchedule};
use crate::error::{Error, Result};
use crate::problems::{ProblemParams, DECISION_DIM};
use crate::rng::rng_for;

/// Rows per parallel forward/backward work item. Fixed so that gradient
/// reductions happen in the same order for any worker count.
pub const GRAD_CHUNK: usize = 32;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DRAWS: u64 = 2;
const STREAM_AUX: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Vanilla,
    Constrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_uncond: f64,
    pub seed: u64,
    pub lambda: f64,
    pub mode: TrainMode,
    pub reweighting: Reweighting,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-4,
            p_uncond: 0.1,
            seed: 0,
            lambda: 0.0,
            mode: TrainMode::Vanilla,
            reweighting: Reweighting::PerStep,
            architecture: Architecture::desk(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config("p_uncond must lie in [0, 1]".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        match (self.mode, self.lambda == 0.0) {
            (TrainMode::Vanilla, false) => Err(Error::Config("vanilla mode requires lambda = 0".into())),
            (TrainMode::Constrained, true) => Err(Error::Config("constrained mode requires lambda > 0".into())),
            _ => self.architecture.validate(),
        }
    }
}

/// All randomness consumed by one loss evaluation, drawn up front so a
/// loss is a pure function of `(weights, batch, draws)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    pub k: Vec<usize>,
    /// Forward-process noise, `n * 161` row-major.
    pub eps: Vec<f64>,
    /// Rows trained with the null condition.
    pub uncond: Vec<bool>,
    /// Ancestral noise for the one-step reverse sample (zero rows at `k = 1`).
    pub z: Vec<f64>,
    /// Extra forward-process draws for per-sample re-weighting,
    /// `n * n_reweight * 161`.
    pub reweight_eps: Vec<f64>,
    pub n_reweight: usize,
}

impl LossDraws {
    /// `k`, `b` and `eps` come from `main`; `z` and re-weighting noise from
    /// `aux`, so the diffusion term sees the same stream whether or not the
    /// violation term is computed.
    pub fn sample<R: Rng + ?Sized, S: Rng + ?Sized>(
        n: usize,
        k_steps: usize,
        p_uncond: f64,
        n_reweight: usize,
        main: &mut R,
        aux: &mut S,
    ) -> Self {
        let mut k = Vec::with_capacity(n);
        let mut uncond = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n * DECISION_DIM);
        for _ in 0..n {
            k.push(main.random_range(1..=k_steps));
            uncond.push(main.random::<f64>() < p_uncond);
            eps.extend(standard_normal_vec(main, DECISION_DIM));
        }
        let mut z = Vec::with_capacity(n * DECISION_DIM);
        for &ki in &k {
            if ki > 1 {
                z.extend(standard_normal_vec(aux, DECISION_DIM));
            } else {
                z.extend(std::iter::repeat_n(0.0, DECISION_DIM));
            }
        }
        let reweight_eps = standard_normal_vec(aux, n * n_reweight * DECISION_DIM);
        Self {
            k,
            eps,
            uncond,
            z,
            reweight_eps,
            n_reweight,
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub(crate) fn eps_row(&self, i: usize) -> &[f64] {
        &self.eps[i * DECISION_DIM..(i + 1) * DECISION_DIM]
    }

    pub(crate) fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * DECISION_DIM..(i + 1) * DECISION_DIM]
    }
}

/// `(x0 normalized, condition)`.
pub type BatchItem<'a> = (&'a [f64], &'a ProblemParams);

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Batch mean.
    pub value: f64,
    pub per_item: Vec<f64>,
    /// Gradient of `value` with respect to the flat parameter buffer.
    pub grad: Option<Vec<f64>>,
    /// Rows evaluated with the null condition.
    pub n_uncond: usize,
}

pub(crate) fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(GRAD_CHUNK)
        .map(|lo| (lo, (lo + GRAD_CHUNK).min(n)))
        .collect()
}

pub(crate) fn check_draws(batch: &[BatchItem<'_>], draws: &LossDraws, sched: &NoiseSchedule) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if draws.len() != batch.len() {
        return Err(Error::Shape {
            expected: batch.len(),
            got: draws.len(),
        });
    }
    if let Some(&k) = draws.k.iter().find(|&&k| k == 0 || k > sched.k_steps()) {
        return Err(Error::Index {
            index: k,
            lo: 1,
            hi: sched.k_steps(),
        });
    }
    for (x0, _) in batch {
        if x0.len() != DECISION_DIM {
            return Err(Error::Shape {
                expected: DECISION_DIM,
                got: x0.len(),
            });
        }
    }
    Ok(())
}

/// Sums per-chunk gradients in chunk order.
pub(crate) fn reduce_grads(n: usize, parts: Vec<Vec<f64>>) -> Vec<f64> {
    let mut total = vec![0.0; n];
    for g in parts {
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
    }
    total
}

/// Noise-prediction loss: the batch mean of `|eps_hat - eps|^2` with
/// `x_k = sqrt(abar_k) x0 + sqrt(1 - abar_k) eps` and the condition dropped
/// on rows flagged `uncond`.
pub fn diffusion_loss(
    model: &Denoiser,
    batch: &[BatchItem<'_>],
    draws: &LossDraws,
    sched: &NoiseSchedule,
    with_grad: bool,
) -> Result<LossOutput> {
    check_draws(batch, draws, sched)?;
    let n = batch.len();
    let scale = 2.0 / n as f64;
    let parts: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = chunk_ranges(n)
        .into_par_iter()
        .map(|(lo, hi)| {
            let rows = hi - lo;
            let mut x = Vec::with_capacity(rows * DECISION_DIM);
            let mut conds = Vec::with_capacity(rows);
            for i in lo..hi {
                x.extend(forward_raw(batch[i].0, draws.k[i], draws.eps_row(i), sched));
                conds.push(if draws.uncond[i] { None } else { Some(batch[i].1) });
            }
            let ks = &draws.k[lo..hi];
            model.check_batch(&x, ks, &conds)?;
            let (out, cache) = model.forward_cached(&x, ks, &conds);
            let eps = Array2::from_shape_vec((rows, DECISION_DIM), draws.eps[lo * DECISION_DIM..hi * DECISION_DIM].to_vec())
                .expect("draw shape");
            let diff = &out - &eps;
            let per_item: Vec<f64> = diff.rows().into_iter().map(|r| r.dot(&r)).collect();
            let grad = with_grad.then(|| {
                let mut g = vec![0.0; model.n_params()];
                model.backward(&cache, &(diff * scale), &mut g);
                g
            });
            Ok((per_item, grad))
        })
        .collect();
    let mut per_item = Vec::with_capacity(n);
    let mut grads = Vec::new();
    for p in parts {
        let (v, g) = p?;
        per_item.extend(v);
        grads.extend(g);
    }
    let value = per_item.iter().sum::<f64>() / n as f64;
    Ok(LossOutput {
        value,
        per_item,
        grad: with_grad.then(|| reduce_grads(model.n_params(), grads)),
        n_uncond: draws.uncond.iter().filter(|b| **b).count(),
    })
}

/// Which loss the training loop minimizes.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Diffusion,
    Hybrid {
        gt: &'a GtViolationTable,
        lambda: f64,
        reweighting: Reweighting,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub diffusion: f64,
    /// Mean re-weighted violation term before multiplication by lambda
    /// (zero for the plain diffusion objective).
    pub violation: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Denoiser,
    pub log: Vec<EpochLog>,
}

/// Trains with the plain noise-prediction loss.
pub fn train_vanilla(dataset: &[DatasetRecord], cfg: &TrainConfig, sched: &NoiseSchedule) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Vanilla {
        return Err(Error::Config("train_vanilla needs mode = vanilla".into()));
    }
    train_with_objective(dataset, cfg, sched, Objective::Diffusion)
}

/// The shared loop. `cfg.mode` and `cfg.lambda` are not consulted; the
/// objective decides the loss, which lets a zero-lambda hybrid run be
/// compared against a vanilla run.
///
/// Each epoch shuffles with a generator derived from `(seed, epoch)`; step
/// `s` draws its loss randomness from generators derived from
/// `(seed, epoch, s)`. Weights are rounded to `f32` at the end so that the
/// returned model equals its checkpoint.
pub fn train_with_objective(
    dataset: &[DatasetRecord],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    objective: Objective<'_>,
) -> Result<TrainOutput> {
    let Some(first) = dataset.first() else {
        return Err(Error::Config("training dataset is empty".into()));
    };
    let kind = first.kind;
    check_kind(dataset, kind)?;
    if let Objective::Hybrid { gt, .. } = objective {
        gt.check_compatible(kind, sched)?;
    }
    let mut model = Denoiser::new(kind, cfg.architecture.clone(), cfg.seed)?;
    let mut adam = Adam::new(model.n_params(), cfg.learning_rate);
    let n_reweight = match objective {
        Objective::Hybrid {
            reweighting: Reweighting::PerSample { n_draws },
            ..
        } => n_draws,
        _ => 0,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut sum_total, mut sum_diff, mut sum_vio) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let path = [epoch as u64, step as u64];
            let draws = LossDraws::sample(
                idx.len(),
                sched.k_steps(),
                cfg.p_uncond,
                n_reweight,
                &mut rng_for(cfg.seed, &[STREAM_DRAWS, path[0], path[1]]),
                &mut rng_for(cfg.seed, &[STREAM_AUX, path[0], path[1]]),
            );
            let batch: Vec<BatchItem<'_>> = idx
                .iter()
                .map(|&i| (dataset[i].x_star.as_slice(), &dataset[i].params))
                .collect();
            let (total, diff, vio, grad) = match objective {
                Objective::Diffusion => {
                    let out = diffusion_loss(&model, &batch, &draws, sched, true)?;
                    (out.value, out.value, 0.0, out.grad.expect("requested"))
                }
                Objective::Hybrid {
                    gt,
                    lambda,
                    reweighting,
                } => {
                    let out = hybrid_loss(&model, &batch, &draws, sched, gt, lambda, reweighting, true)?;
                    (out.total, out.diffusion, out.violation, out.grad.expect("requested"))
                }
            };
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    learning_rate: cfg.learning_rate,
                    detail: format!(
                        "loss {total} (diffusion {diff}, violation {vio}); batch records {:?}",
                        idx
                    ),
                });
            }
            adam.step(model.params_mut(), &grad);
            sum_total += total;
            sum_diff += diff;
            sum_vio += vio;
            steps += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: sum_total / steps as f64,
            diffusion: sum_diff / steps as f64,
            violation: sum_vio / steps as f64,
            steps,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} diffusion {:.5} violation {:.5}",
            entry.loss,
            entry.diffusion,
            entry.violation
        );
        log.push(entry);
    }
    model.round_to_f32();
    Ok(TrainOutput { model, log })
}

//! DDPM machinery over normalized decision vectors: the linear noise
//! schedule, forward corruption, the ancestral reverse step, and
//! classifier-free guided sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{DecisionVector, ProblemKind, ProblemParams, DECISION_DIM};
use crate::rng::rng_for;

/// Chains evaluated together in one batched model call. Fixed so that the
/// batch composition, and hence every floating-point result, is independent
/// of the worker count.
pub const SAMPLE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub k_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Linear-beta schedule. `beta[k - 1]` is `beta_k`; `alpha_bar[k]` is the
/// cumulative product up to step `k`, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub params: ScheduleParams,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn k_steps(&self) -> usize {
        self.params.k_steps
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    fn check_step(&self, k: usize, lo: usize) -> Result<()> {
        if k < lo || k > self.k_steps() {
            return Err(Error::Index {
                index: k,
                lo,
                hi: self.k_steps(),
            });
        }
        Ok(())
    }
}

pub fn make_schedule(k_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..k_steps)
        .map(|i| {
            if k_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (k_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(k_steps + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * a);
    }
    Ok(NoiseSchedule {
        params: ScheduleParams {
            k_steps,
            beta_start,
            beta_end,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.k_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub p_uncond: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            p_uncond: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!(
                "p_uncond must lie in [0, 1], got {}",
                self.p_uncond
            )));
        }
        Ok(())
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape { expected, got });
    }
    Ok(())
}

/// `x_k = sqrt(alpha_bar_k) x_0 + sqrt(1 - alpha_bar_k) eps`.
pub fn forward_sample(
    x0: &DecisionVector,
    k: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if !x0.normalized {
        return Err(Error::Config("forward_sample expects a normalized x0".into()));
    }
    check_len(x0.len(), eps.len())?;
    sched.check_step(k, 0)?;
    Ok(forward_raw(&x0.values, k, eps, sched))
}

pub(crate) fn forward_raw(x0: &[f64], k: usize, eps: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// `(omega + 1) eps_cond - omega eps_uncond`.
pub fn guided_noise(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Vec<f64> {
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| (omega + 1.0) * c - omega * u)
        .collect()
}

/// Ancestral step `x_k -> x_{k-1}`. The caller passes `z = 0` at `k = 1`.
pub fn reverse_step(
    x_k: &[f64],
    k: usize,
    eps_hat: &[f64],
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(k, 1)?;
    check_len(x_k.len(), eps_hat.len())?;
    check_len(x_k.len(), z.len())?;
    let mut out = vec![0.0; x_k.len()];
    reverse_into(x_k, k, eps_hat, z, sched, &mut out);
    Ok(out)
}

/// Coefficients `(1 / sqrt(alpha_k), beta_k / sqrt(1 - alpha_bar_k), sqrt(beta_k))`.
pub(crate) fn reverse_coefficients(k: usize, sched: &NoiseSchedule) -> (f64, f64, f64) {
    let beta = sched.beta(k);
    (
        1.0 / sched.alpha(k).sqrt(),
        beta / (1.0 - sched.alpha_bar(k)).sqrt(),
        beta.sqrt(),
    )
}

pub(crate) fn reverse_into(
    x_k: &[f64],
    k: usize,
    eps_hat: &[f64],
    z: &[f64],
    sched: &NoiseSchedule,
    out: &mut [f64],
) {
    let (inv_sqrt_alpha, eps_coef, sigma) = reverse_coefficients(k, sched);
    for i in 0..x_k.len() {
        out[i] = inv_sqrt_alpha * (x_k[i] - eps_coef * eps_hat[i]) + sigma * z[i];
    }
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A noise predictor `eps_theta(x_k, k, y)` for one problem kind.
pub trait NoisePredictor: Sync {
    fn kind(&self) -> ProblemKind;

    /// Predicts the noise for `rows` stacked decision vectors (row-major,
    /// `rows * 161` values) at step `k`. `condition = None` is the null
    /// condition.
    fn predict(&self, x: &[f64], rows: usize, k: usize, condition: Option<&ProblemParams>) -> Result<Vec<f64>>;
}

/// Draws `n` guided samples for one instance, clipped to `[-1, 1]`.
///
/// Chain `i` draws its initial noise and all ancestral noise from its own
/// generator derived from `(seed, i)`.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    params: &ProblemParams,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<DecisionVector>> {
    sample_impl(model, params, guidance, sched, n, seed, false)
}

fn sample_impl<M: NoisePredictor + ?Sized>(
    model: &M,
    params: &ProblemParams,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    always_uncond: bool,
) -> Result<Vec<DecisionVector>> {
    guidance.validate()?;
    if model.kind() != params.kind {
        return Err(Error::Config(format!(
            "model was trained for {} but the instance is {}",
            model.kind(),
            params.kind
        )));
    }
    params.validate()?;
    let d = DECISION_DIM;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(SAMPLE_CHUNK)
        .map(|lo| (lo, (lo + SAMPLE_CHUNK).min(n)))
        .collect();
    let results: Vec<Result<Vec<DecisionVector>>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let rows = hi - lo;
            let mut rngs: Vec<_> = (lo..hi).map(|i| rng_for(seed, &[i as u64])).collect();
            let mut x: Vec<f64> = rngs
                .iter_mut()
                .flat_map(|r| standard_normal_vec(r, d))
                .collect();
            let mut next = vec![0.0; rows * d];
            let zeros = vec![0.0; d];
            for k in (1..=sched.k_steps()).rev() {
                let eps_c = model.predict(&x, rows, k, Some(params))?;
                let eps = if guidance.omega != 0.0 || always_uncond {
                    let eps_u = model.predict(&x, rows, k, None)?;
                    guided_noise(&eps_c, &eps_u, guidance.omega)
                } else {
                    eps_c
                };
                for (r, rng) in rngs.iter_mut().enumerate() {
                    let z = if k > 1 { standard_normal_vec(rng, d) } else { zeros.clone() };
                    let s = r * d..(r + 1) * d;
                    reverse_into(&x[s.clone()], k, &eps[s.clone()], &z, sched, &mut next[s]);
                }
                std::mem::swap(&mut x, &mut next);
            }
            Ok(x.chunks_exact(d)
                .map(|row| DecisionVector::normalized(row.iter().map(|v| v.clamp(-1.0, 1.0)).collect()))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::sample_problem_params;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Deterministic nonlinear stub with distinct conditional and null
    /// outputs.
    struct Stub {
        kind: ProblemKind,
        uncond_calls: AtomicUsize,
    }

    impl NoisePredictor for Stub {
        fn kind(&self) -> ProblemKind {
            self.kind
        }

        fn predict(&self, x: &[f64], _rows: usize, k: usize, c: Option<&ProblemParams>) -> Result<Vec<f64>> {
            let shift = match c {
                Some(p) => p.scaled_condition()[0],
                None => {
                    self.uncond_calls.fetch_add(1, Ordering::Relaxed);
                    -0.3
                }
            };
            Ok(x.iter().map(|v| 0.5 * (v + shift).tanh() + 1e-3 * k as f64).collect())
        }
    }

    fn stub() -> Stub {
        Stub {
            kind: ProblemKind::Tabletop,
            uncond_calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = make_schedule(500, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((s.beta(500) - 0.02).abs() < 1e-15);
        // Independent oracle: exp of the summed logs.
        let log_sum: f64 = (0..500)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 499.0)).ln())
            .sum();
        assert!((s.alpha_bar(500) - log_sum.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(500) < 0.01);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_identities() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = DecisionVector::normalized((0..DECISION_DIM).map(|i| (i as f64 / 200.0) - 0.4).collect());
        let eps: Vec<f64> = (0..DECISION_DIM).map(|i| (i as f64).sin()).collect();
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0.values);
        assert!(matches!(
            forward_sample(&x0, 1, &eps[1..], &s),
            Err(Error::Shape { .. })
        ));
        assert!(forward_sample(&x0, 101, &eps, &s).is_err());

        let mut quarter = s.clone();
        quarter.alpha_bar[3] = 0.25;
        let out = forward_sample(&x0, 3, &vec![0.0; DECISION_DIM], &quarter).unwrap();
        for (o, x) in out.iter().zip(&x0.values) {
            assert_eq!(*o, 0.5 * x);
        }
    }

    #[test]
    fn guided_noise_cases() {
        let c = [1.0, -2.0, 0.5];
        let u = [0.25, 3.0, -1.0];
        assert_eq!(guided_noise(&c, &u, 0.0), c.to_vec());
        assert_eq!(guided_noise(&c, &u, 1.0), vec![1.75, -7.0, 2.0]);
        for w in [0.0, 0.7, 3.0] {
            assert_eq!(guided_noise(&c, &c, w), c.to_vec());
        }
    }

    #[test]
    fn reverse_step_cases() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x: Vec<f64> = (0..DECISION_DIM).map(|i| (i as f64 * 0.37).cos()).collect();
        let zero = vec![0.0; DECISION_DIM];
        let out = reverse_step(&x, 40, &zero, &zero, &s).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - v / s.alpha(40).sqrt()).abs() < 1e-15);
        }
        assert!(matches!(
            reverse_step(&x, 0, &zero, &zero, &s),
            Err(Error::Index { index: 0, .. })
        ));
        assert!(reverse_step(&x, 101, &zero, &zero, &s).is_err());
    }

    #[test]
    fn sample_edge_cases_and_determinism() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let p = sample_problem_params(3, ProblemKind::Tabletop).unwrap();
        let g = GuidanceConfig::default();
        let m = stub();
        assert!(sample(&m, &p, &g, &s, 0, 1).unwrap().is_empty());
        let a = sample(&m, &p, &g, &s, 70, 5).unwrap();
        let b = sample(&m, &p, &g, &s, 70, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 70);
        assert!(a.iter().all(|x| x.normalized && x.values.iter().all(|v| (-1.0..=1.0).contains(v))));
        // Chains do not depend on how many others are drawn alongside.
        let head = sample(&m, &p, &g, &s, 3, 5).unwrap();
        assert_eq!(head[..], a[..3]);
        let two_car = sample_problem_params(3, ProblemKind::TwoCar).unwrap();
        assert!(matches!(sample(&m, &two_car, &g, &s, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_guidance_skips_unconditional_branch() {
        let s = make_schedule(10, 1e-3, 0.2).unwrap();
        let p = sample_problem_params(4, ProblemKind::Tabletop).unwrap();
        let g = GuidanceConfig {
            omega: 0.0,
            p_uncond: 0.1,
        };
        let m = stub();
        let skipped = sample(&m, &p, &g, &s, 8, 9).unwrap();
        assert_eq!(m.uncond_calls.load(Ordering::Relaxed), 0);
        let evaluated = sample_impl(&m, &p, &g, &s, 8, 9, true).unwrap();
        assert!(m.uncond_calls.load(Ordering::Relaxed) > 0);
        assert_eq!(skipped, evaluated);
    }
}

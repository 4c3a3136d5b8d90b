//! Local NLP solver: augmented Lagrangian outer loop with a projected
//! gradient inner loop.
//!
//! The solver works in normalized coordinates `z in [-1, 1]^161`, where box
//! projection is a clamp. The inner loop uses a monotone backtracking
//! (Armijo) line search along the projection arc, seeded with the
//! Barzilai-Borwein step length.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{
    constraints_of, denormalize_slice, normalization_scale, rollout_raw, violation_from_values,
    vjp_with_traj, ConstraintValues, DecisionVector, ProblemKind, ProblemParams, DECISION_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub penalty_init: f64,
    pub penalty_growth: f64,
    pub feas_tol: f64,
    pub opt_tol: f64,
    pub step_rule: StepRule,
    pub direction: InnerDirection,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 20,
            max_inner_iters: 400,
            penalty_init: 1.0,
            penalty_growth: 5.0,
            feas_tol: 1e-4,
            opt_tol: 1e-3,
            step_rule: StepRule::Backtracking,
            direction: InnerDirection::Lbfgs { memory: 10 },
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.feas_tol > 0.0) || !(self.opt_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) || !(self.penalty_init > 0.0) {
            return Err(Error::Config(
                "penalty_init must be positive and penalty_growth > 1".into(),
            ));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::Config("max_outer_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    /// Physical-space solution.
    pub x_star: DecisionVector,
    pub objective: f64,
    pub violation: f64,
    pub converged: bool,
    pub outer_iters: usize,
    pub inner_iters_total: usize,
    /// Seconds.
    pub wall_time: f64,
}

/// Per-iteration record, filled only by [`solve_local_traced`].
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    /// Penalty parameter used in each outer iteration.
    pub penalties: Vec<f64>,
    /// Augmented-objective values at every accepted inner iterate, one list
    /// per outer iteration (starting with the initial value).
    pub inner_values: Vec<Vec<f64>>,
}

const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e6;
const ACTIVE_TOL: f64 = 1e-2;
const MULTIPLIER_CAP: f64 = 1e3;

struct Problem<'a> {
    params: &'a ProblemParams,
    kind: ProblemKind,
    scale: Vec<f64>,
}

struct Eval {
    values: ConstraintValues,
    objective: f64,
    violation: f64,
}

impl Problem<'_> {
    fn eval(&self, z: &[f64]) -> Eval {
        let x = denormalize_slice(self.kind, z);
        let traj = rollout_raw(self.kind, &x);
        let values = constraints_of(&traj, self.params);
        let violation = violation_from_values(self.kind, &values).total;
        Eval {
            objective: x[0],
            values,
            violation,
        }
    }

    fn augmented(&self, e: &Eval, lam: &[f64], mu: &[f64], rho: f64) -> f64 {
        let mut v = e.objective;
        for (h, m) in e.values.equality.iter().zip(mu) {
            v += m * h + 0.5 * rho * h * h;
        }
        let mut ineq = 0.0;
        for (g, l) in e.values.inequality.iter().zip(lam) {
            let s = (l + rho * g).max(0.0);
            ineq += s * s - l * l;
        }
        v + ineq / (2.0 * rho)
    }

    /// Value and gradient (in `z`) of the augmented Lagrangian.
    fn augmented_grad(&self, z: &[f64], lam: &[f64], mu: &[f64], rho: f64) -> (f64, Vec<f64>, Eval) {
        let x = denormalize_slice(self.kind, z);
        let traj = rollout_raw(self.kind, &x);
        let values = constraints_of(&traj, self.params);
        let violation = violation_from_values(self.kind, &values).total;
        let wg: Vec<f64> = values
            .inequality
            .iter()
            .zip(lam)
            .map(|(g, l)| (l + rho * g).max(0.0))
            .collect();
        let wh: Vec<f64> = values
            .equality
            .iter()
            .zip(mu)
            .map(|(h, m)| m + rho * h)
            .collect();
        let mut grad = vjp_with_traj(&x, &traj, self.params, &wg, &wh);
        grad[0] += 1.0;
        for (g, s) in grad.iter_mut().zip(&self.scale) {
            *g *= s;
        }
        let e = Eval {
            objective: x[0],
            values,
            violation,
        };
        (self.augmented(&e, lam, mu, rho), grad, e)
    }

    /// Least-squares first-order multiplier estimate at `z` over the free
    /// components and the near-active constraints.
    fn estimate_multipliers(&self, z: &[f64], e: &Eval) -> (Vec<f64>, Vec<f64>) {
        let l = e.values.inequality.len();
        let m = e.values.equality.len();
        let mut lam = vec![0.0; l];
        let mut mu = vec![0.0; m];
        let free: Vec<usize> = (0..DECISION_DIM)
            .filter(|&i| z[i] > -1.0 + 1e-9 && z[i] < 1.0 - 1e-9)
            .collect();
        let active: Vec<usize> = (0..l)
            .filter(|&i| e.values.inequality[i] >= -ACTIVE_TOL)
            .collect();
        let n_cols = m + active.len();
        if free.is_empty() || n_cols == 0 {
            return (lam, mu);
        }
        let x = denormalize_slice(self.kind, z);
        let traj = rollout_raw(self.kind, &x);
        let mut jac = DMatrix::<f64>::zeros(free.len(), n_cols);
        let mut w_ineq = vec![0.0; l];
        let mut w_eq = vec![0.0; m];
        for col in 0..n_cols {
            if col < m {
                w_eq[col] = 1.0;
            } else {
                w_ineq[active[col - m]] = 1.0;
            }
            let g = vjp_with_traj(&x, &traj, self.params, &w_ineq, &w_eq);
            for (r, &i) in free.iter().enumerate() {
                jac[(r, col)] = g[i] * self.scale[i];
            }
            if col < m {
                w_eq[col] = 0.0;
            } else {
                w_ineq[active[col - m]] = 0.0;
            }
        }
        let rhs = DVector::from_iterator(
            free.len(),
            free.iter().map(|&i| if i == 0 { -self.scale[0] } else { 0.0 }),
        );
        let svd = jac.svd(true, true);
        let Ok(w) = svd.solve(&rhs, 1e-10) else {
            return (lam, mu);
        };
        if w.iter().any(|v| !v.is_finite()) {
            return (lam, mu);
        }
        for j in 0..m {
            mu[j] = w[j].clamp(-MULTIPLIER_CAP, MULTIPLIER_CAP);
        }
        for (c, &i) in active.iter().enumerate() {
            lam[i] = w[m + c].clamp(0.0, MULTIPLIER_CAP);
        }
        (lam, mu)
    }
}

/// Search direction used by the inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerDirection {
    /// Negative gradient with a Barzilai-Borwein initial step.
    SteepestDescent,
    /// Limited-memory BFGS direction on the free variables.
    Lbfgs { memory: usize },
}

struct DirectionState {
    kind: InnerDirection,
    /// Initial trial step for steepest descent.
    bb_step: Option<f64>,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl DirectionState {
    fn new(kind: InnerDirection) -> Self {
        Self {
            kind,
            bb_step: None,
            pairs: VecDeque::new(),
        }
    }

    /// Two-loop recursion restricted to the variables not pinned at a bound.
    fn lbfgs_direction(&self, z: &[f64], grad: &[f64]) -> Vec<f64> {
        let free: Vec<bool> = z
            .iter()
            .zip(grad)
            .map(|(zi, gi)| !((*zi <= -1.0 && *gi > 0.0) || (*zi >= 1.0 && *gi < 0.0)))
            .collect();
        let mut q: Vec<f64> = grad
            .iter()
            .zip(&free)
            .map(|(g, f)| if *f { *g } else { 0.0 })
            .collect();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y) in self.pairs.iter().rev() {
            let rho = 1.0 / dot(s, y);
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        let gamma = match self.pairs.back() {
            Some((s, y)) => dot(s, y) / dot(y, y),
            None => {
                let n = projected_gradient_norm(z, grad);
                if n > 0.0 { (1.0 / n).min(1.0) } else { 1.0 }
            }
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y), (a, rho)) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter()
            .zip(&free)
            .map(|(v, f)| if *f { -v } else { 0.0 })
            .collect()
    }

    /// Backtracking along the projection arc `P(z + alpha d)`; returns the
    /// accepted point or `None` when the step underflows.
    #[allow(clippy::too_many_arguments)]
    fn line_search(
        &mut self,
        prob: &Problem<'_>,
        z: &[f64],
        f: f64,
        grad: &[f64],
        lam: &[f64],
        mu: &[f64],
        rho: f64,
    ) -> Option<Vec<f64>> {
        let (mut d, mut alpha) = match self.kind {
            InnerDirection::SteepestDescent => {
                let a0 = self.bb_step.unwrap_or_else(|| {
                    let n = projected_gradient_norm(z, grad);
                    if n > 0.0 { (1.0 / n).min(1.0) } else { 1.0 }
                });
                (grad.iter().map(|g| -g).collect::<Vec<_>>(), a0)
            }
            InnerDirection::Lbfgs { .. } => (self.lbfgs_direction(z, grad), 1.0),
        };
        if dot(&d, grad) >= 0.0 {
            self.pairs.clear();
            d = grad.iter().map(|g| -g).collect();
            let n = projected_gradient_norm(z, grad);
            alpha = if n > 0.0 { (1.0 / n).min(1.0) } else { 1.0 };
        }
        loop {
            let mut trial: Vec<f64> = z.iter().zip(&d).map(|(a, di)| a + alpha * di).collect();
            project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(z).map(|(a, b)| a - b).collect();
            let decrease = dot(grad, &step);
            if decrease < 0.0 {
                let e_trial = prob.eval(&trial);
                let f_trial = prob.augmented(&e_trial, lam, mu, rho);
                if f_trial.is_finite() && f_trial <= f + ARMIJO * decrease {
                    return Some(trial);
                }
            }
            alpha *= 0.5;
            if alpha < STEP_MIN {
                return None;
            }
        }
    }

    fn update(&mut self, z_new: &[f64], z: &[f64], g_new: &[f64], g: &[f64]) {
        let s: Vec<f64> = z_new.iter().zip(z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        match self.kind {
            InnerDirection::SteepestDescent => {
                self.bb_step = Some(if sy > 0.0 {
                    (dot(&s, &s) / sy).clamp(STEP_MIN, STEP_MAX)
                } else {
                    STEP_MAX
                });
            }
            InnerDirection::Lbfgs { memory } => {
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                    if self.pairs.len() == memory {
                        self.pairs.pop_front();
                    }
                    self.pairs.push_back((s, y));
                }
            }
        }
    }
}

fn project(z: &mut [f64]) {
    for v in z {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// `max_i |P(z - grad) - z|_i`, the stationarity measure on the box.
fn projected_gradient_norm(z: &[f64], grad: &[f64]) -> f64 {
    z.iter()
        .zip(grad)
        .map(|(zi, gi)| ((zi - gi).clamp(-1.0, 1.0) - zi).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Solves one instance from `x_init` (physical; clamped into the box).
pub fn solve_local(x_init: &DecisionVector, params: &ProblemParams, cfg: &SolveConfig) -> Result<SolveResult> {
    solve_impl(x_init, params, cfg, None)
}

pub fn solve_local_traced(
    x_init: &DecisionVector,
    params: &ProblemParams,
    cfg: &SolveConfig,
) -> Result<(SolveResult, SolveTrace)> {
    let mut trace = SolveTrace::default();
    let res = solve_impl(x_init, params, cfg, Some(&mut trace))?;
    Ok((res, trace))
}

fn solve_impl(
    x_init: &DecisionVector,
    params: &ProblemParams,
    cfg: &SolveConfig,
    mut trace: Option<&mut SolveTrace>,
) -> Result<SolveResult> {
    cfg.validate()?;
    params.validate()?;
    let kind = params.kind;
    let start = Instant::now();
    let init_phys = if x_init.normalized {
        x_init.denormalize(kind)?
    } else {
        x_init.clone()
    };
    init_phys.check_dim()?;
    if !all_finite(&init_phys.values) {
        return Err(Error::NumericInput("initial guess is not finite".into()));
    }
    let prob = Problem {
        params,
        kind,
        scale: normalization_scale(kind),
    };
    let (mut z, _) = init_phys.normalize(kind)?;
    let mut z = std::mem::take(&mut z.values);

    let e0 = prob.eval(&z);
    let (mut lam, mut mu) = prob.estimate_multipliers(&z, &e0);
    let mut rho = cfg.penalty_init;

    // Best iterate by (violation, objective).
    let mut best = (z.clone(), e0.violation, e0.objective);
    let mut prev_violation = e0.violation;
    let mut inner_total = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut diverged = false;

    'outer: while outer < cfg.max_outer_iters {
        outer += 1;
        if let Some(t) = trace.as_deref_mut() {
            t.penalties.push(rho);
            t.inner_values.push(Vec::new());
        }
        let (mut f, mut grad, mut e) = prob.augmented_grad(&z, &lam, &mu, rho);
        if !f.is_finite() || !all_finite(&grad) {
            diverged = true;
            break;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.inner_values.last_mut().unwrap().push(f);
        }
        let mut dir = DirectionState::new(cfg.direction);
        let mut pg_norm = projected_gradient_norm(&z, &grad);
        let mut inner = 0;
        while inner < cfg.max_inner_iters && pg_norm > cfg.opt_tol {
            inner += 1;
            let Some(z_new) = dir.line_search(&prob, &z, f, &grad, &lam, &mu, rho) else {
                break;
            };
            let (f_new, g_new, e_new) = prob.augmented_grad(&z_new, &lam, &mu, rho);
            if !f_new.is_finite() || !all_finite(&g_new) {
                diverged = true;
                break 'outer;
            }
            dir.update(&z_new, &z, &g_new, &grad);
            z = z_new;
            f = f_new;
            grad = g_new;
            e = e_new;
            pg_norm = projected_gradient_norm(&z, &grad);
            if let Some(t) = trace.as_deref_mut() {
                t.inner_values.last_mut().unwrap().push(f);
            }
        }
        inner_total += inner;
        log::trace!(
            "outer {outer}: rho {rho:.3e} inner {inner} pg {pg_norm:.3e} viol {:.3e} obj {:.4}",
            e.violation,
            e.objective
        );

        if (e.violation, e.objective) < (best.1, best.2) || e.violation <= cfg.feas_tol && best.1 > cfg.feas_tol {
            best = (z.clone(), e.violation, e.objective);
        }
        if e.violation <= cfg.feas_tol && pg_norm <= cfg.opt_tol {
            converged = true;
            best = (z.clone(), e.violation, e.objective);
            break;
        }

        for (m, h) in mu.iter_mut().zip(&e.values.equality) {
            *m += rho * h;
        }
        for (l, g) in lam.iter_mut().zip(&e.values.inequality) {
            *l = (*l + rho * g).max(0.0);
        }
        if e.violation > cfg.feas_tol && e.violation > 0.25 * prev_violation {
            rho *= cfg.penalty_growth;
        }
        prev_violation = e.violation;
    }
    if diverged {
        log::debug!("solver diverged on a {} instance", kind);
    }

    let x_star = DecisionVector::physical(denormalize_slice(kind, &best.0));
    Ok(SolveResult {
        objective: x_star.t_final(),
        x_star,
        violation: best.1,
        converged: converged && !diverged,
        outer_iters: outer,
        inner_iters_total: inner_total,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

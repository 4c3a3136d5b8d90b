use serde::{Deserialize, Serialize};

use super::dynamics::{backprop, check_finite, rollout_raw};
use super::{DecisionVector, ProblemKind, ProblemParams, Trajectory};
use super::{CAR_SAFE_DISTANCE, COLLISION_MARGIN};
use crate::error::{Error, Result};

/// Inequalities (`<= 0` satisfied) and equalities (`= 0` satisfied).
///
/// Inequalities are ordered by knot `1..=N`; within a knot by agent, then
/// obstacle, with the two-car separation constraint last. Equalities are the
/// terminal position error of each agent, `x` then `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintValues {
    pub inequality: Vec<f64>,
    pub equality: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationBreakdown {
    pub obstacle: f64,
    pub goal: f64,
    pub inter_car: f64,
}

/// Total constraint violation `sum max(g, 0) + sum |h|` with its split by
/// constraint category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub total: f64,
    pub by_category: ViolationBreakdown,
}

impl ViolationReport {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.total <= tol
    }
}

/// Objective: the final time.
pub fn evaluate_objective(x: &DecisionVector, _params: &ProblemParams) -> f64 {
    x.t_final()
}

fn checked(x: &DecisionVector, params: &ProblemParams) -> Result<()> {
    if x.normalized {
        return Err(Error::Config(
            "constraints are evaluated on physical vectors".into(),
        ));
    }
    x.check_dim()?;
    params.validate()
}

pub fn evaluate_constraints(x: &DecisionVector, params: &ProblemParams) -> Result<ConstraintValues> {
    checked(x, params)?;
    let traj = rollout_raw(params.kind, &x.values);
    Ok(constraints_of(&traj, params))
}

pub(crate) fn constraints_of(traj: &Trajectory, params: &ProblemParams) -> ConstraintValues {
    let kind = params.kind;
    let n = kind.n_steps();
    let agents = kind.n_agents();
    let per_step = agents * params.obstacle_radii.len()
        + usize::from(kind == ProblemKind::TwoCar);
    let mut inequality = Vec::with_capacity(n * per_step);
    for i in 1..=n {
        for a in 0..agents {
            let p = traj.position(i, a);
            for (c, r) in params.obstacle_centers.iter().zip(&params.obstacle_radii) {
                inequality.push(r + COLLISION_MARGIN - (p[0] - c[0]).hypot(p[1] - c[1]));
            }
        }
        if kind == ProblemKind::TwoCar {
            let (p1, p2) = (traj.position(i, 0), traj.position(i, 1));
            inequality.push(CAR_SAFE_DISTANCE - (p1[0] - p2[0]).hypot(p1[1] - p2[1]));
        }
    }
    let mut equality = Vec::with_capacity(2 * agents);
    for (a, g) in params.goals.iter().enumerate() {
        let p = traj.position(n, a);
        equality.push(p[0] - g[0]);
        equality.push(p[1] - g[1]);
    }
    ConstraintValues {
        inequality,
        equality,
    }
}

/// Builds the report from already evaluated constraints.
pub fn violation_from_values(kind: ProblemKind, values: &ConstraintValues) -> ViolationReport {
    let mut by = ViolationBreakdown::default();
    let n_obs_terms = match kind {
        ProblemKind::Tabletop => usize::MAX,
        ProblemKind::TwoCar => values.inequality.len() / kind.n_steps().max(1) - 1,
    };
    let per_step = n_obs_terms.saturating_add(1);
    for (idx, g) in values.inequality.iter().enumerate() {
        let v = g.max(0.0);
        if kind == ProblemKind::TwoCar && idx % per_step == n_obs_terms {
            by.inter_car += v;
        } else {
            by.obstacle += v;
        }
    }
    by.goal = values.equality.iter().map(|h| h.abs()).sum();
    ViolationReport {
        total: by.obstacle + by.inter_car + by.goal,
        by_category: by,
    }
}

pub fn violation(x: &DecisionVector, params: &ProblemParams) -> Result<ViolationReport> {
    let values = evaluate_constraints(x, params)?;
    Ok(violation_from_values(params.kind, &values))
}

/// Violation of a raw physical slice; no validation beyond length.
pub(crate) fn violation_raw(params: &ProblemParams, x: &[f64]) -> f64 {
    let traj = rollout_raw(params.kind, x);
    violation_from_values(params.kind, &constraints_of(&traj, params)).total
}

/// Vector-Jacobian product `sum_i w_ineq[i] grad g_i + sum_j w_eq[j] grad h_j`
/// with respect to the physical decision vector, through the rollout.
pub fn constraint_vjp(
    x: &DecisionVector,
    params: &ProblemParams,
    w_ineq: &[f64],
    w_eq: &[f64],
) -> Result<Vec<f64>> {
    checked(x, params)?;
    check_finite(&x.values)?;
    let traj = rollout_raw(params.kind, &x.values);
    Ok(vjp_with_traj(&x.values, &traj, params, w_ineq, w_eq))
}

pub(crate) fn vjp_with_traj(
    x: &[f64],
    traj: &Trajectory,
    params: &ProblemParams,
    w_ineq: &[f64],
    w_eq: &[f64],
) -> Vec<f64> {
    let kind = params.kind;
    let n = kind.n_steps();
    let d = kind.state_dim();
    let agents = kind.n_agents();
    let mut sg = vec![0.0; (n + 1) * d];
    // Offsets of the planar position of each agent inside the state.
    let pos = |a: usize| if kind == ProblemKind::TwoCar { 4 * a } else { 0 };

    let mut idx = 0;
    for i in 1..=n {
        let row = &mut sg[i * d..(i + 1) * d];
        for a in 0..agents {
            let p = traj.position(i, a);
            for c in &params.obstacle_centers {
                let w = w_ineq[idx];
                idx += 1;
                if w == 0.0 {
                    continue;
                }
                let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                let r = dx.hypot(dy);
                if r > 0.0 {
                    row[pos(a)] -= w * dx / r;
                    row[pos(a) + 1] -= w * dy / r;
                }
            }
        }
        if kind == ProblemKind::TwoCar {
            let w = w_ineq[idx];
            idx += 1;
            if w != 0.0 {
                let (p1, p2) = (traj.position(i, 0), traj.position(i, 1));
                let (dx, dy) = (p1[0] - p2[0], p1[1] - p2[1]);
                let r = dx.hypot(dy);
                if r > 0.0 {
                    row[0] -= w * dx / r;
                    row[1] -= w * dy / r;
                    row[4] += w * dx / r;
                    row[5] += w * dy / r;
                }
            }
        }
    }
    let last = &mut sg[n * d..];
    for a in 0..agents {
        last[pos(a)] += w_eq[2 * a];
        last[pos(a) + 1] += w_eq[2 * a + 1];
    }
    backprop(x, traj, &sg)
}

/// Subgradient weights of the violation functional.
pub(crate) fn violation_weights(values: &ConstraintValues) -> (Vec<f64>, Vec<f64>) {
    let wg = values
        .inequality
        .iter()
        .map(|&g| if g > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let wh = values
        .equality
        .iter()
        .map(|&h| {
            if h > 0.0 {
                1.0
            } else if h < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (wg, wh)
}

/// Gradient of the total violation with respect to the physical decision
/// vector. At kinks the subgradient convention is `0` for `max(g, 0)` at
/// `g = 0` and `0` for `|h|` at `h = 0`.
pub fn violation_gradient(x: &DecisionVector, params: &ProblemParams) -> Result<Vec<f64>> {
    checked(x, params)?;
    check_finite(&x.values)?;
    let (v, g) = violation_and_gradient_raw(params, &x.values);
    debug_assert!(v >= 0.0);
    Ok(g)
}

pub(crate) fn violation_and_gradient_raw(params: &ProblemParams, x: &[f64]) -> (f64, Vec<f64>) {
    let traj = rollout_raw(params.kind, x);
    let values = constraints_of(&traj, params);
    let total = violation_from_values(params.kind, &values).total;
    let (wg, wh) = violation_weights(&values);
    (total, vjp_with_traj(x, &traj, params, &wg, &wh))
}

use serde::{Deserialize, Serialize};

use super::{DecisionVector, ProblemKind, ProblemParams};
use crate::error::{Error, Result};

/// Euler-integrated state sequence, `n_steps + 1` states stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: ProblemKind,
    pub dt: f64,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.kind.state_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        let d = self.kind.state_dim();
        &self.states[i * d..(i + 1) * d]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.kind.state_dim())
    }

    /// Planar position of `agent` at knot `i`.
    pub fn position(&self, i: usize, agent: usize) -> [f64; 2] {
        let s = self.state(i);
        match self.kind {
            ProblemKind::Tabletop => [s[0], s[1]],
            ProblemKind::TwoCar => [s[4 * agent], s[4 * agent + 1]],
        }
    }
}

/// State derivative `f(s, u)`.
pub(crate) fn dynamics(kind: ProblemKind, s: &[f64], u: &[f64], out: &mut [f64]) {
    match kind {
        ProblemKind::Tabletop => {
            out[0] = u[0];
            out[1] = u[1];
        }
        ProblemKind::TwoCar => {
            for car in 0..2 {
                let (v, th) = (s[4 * car + 2], s[4 * car + 3]);
                out[4 * car] = v * th.cos();
                out[4 * car + 1] = v * th.sin();
                out[4 * car + 2] = u[2 * car];
                out[4 * car + 3] = u[2 * car + 1];
            }
        }
    }
}

/// Explicit-Euler rollout with `dt = t_final / n_steps` from the fixed start
/// state. Non-positive final times are integrated as given; only non-finite
/// input is rejected.
pub fn rollout(x: &DecisionVector, params: &ProblemParams) -> Result<Trajectory> {
    if x.normalized {
        return Err(Error::Config("rollout expects a physical vector".into()));
    }
    x.check_dim()?;
    check_finite(&x.values)?;
    Ok(rollout_raw(params.kind, &x.values))
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NumericInput(format!(
            "decision component {i} is not finite"
        ))),
        None => Ok(()),
    }
}

pub(crate) fn rollout_raw(kind: ProblemKind, x: &[f64]) -> Trajectory {
    let n = kind.n_steps();
    let d = kind.state_dim();
    let m = kind.control_dim();
    let dt = x[0] / n as f64;
    let mut states = Vec::with_capacity((n + 1) * d);
    states.extend(kind.start_state());
    let mut f = vec![0.0; d];
    for i in 0..n {
        let s = &states[i * d..(i + 1) * d];
        let u = &x[1 + i * m..1 + (i + 1) * m];
        dynamics(kind, s, u, &mut f);
        for j in 0..d {
            let next = states[i * d + j] + dt * f[j];
            states.push(next);
        }
    }
    Trajectory { kind, dt, states }
}

/// Reverse-mode pass through the rollout.
///
/// `state_grads` holds the direct sensitivity of a scalar loss to every
/// state, flattened like the trajectory. Returns the total gradient with
/// respect to the decision vector, including the `dt = t / N` dependence.
pub(crate) fn backprop(x: &[f64], traj: &Trajectory, state_grads: &[f64]) -> Vec<f64> {
    let kind = traj.kind;
    let n = kind.n_steps();
    let d = kind.state_dim();
    let m = kind.control_dim();
    let dt = traj.dt;
    let mut grad = vec![0.0; x.len()];
    let mut adj = state_grads[n * d..(n + 1) * d].to_vec();
    let mut f = vec![0.0; d];
    let mut grad_dt = 0.0;
    for i in (0..n).rev() {
        let s = traj.state(i);
        let u = &x[1 + i * m..1 + (i + 1) * m];
        dynamics(kind, s, u, &mut f);
        grad_dt += f.iter().zip(&adj).map(|(a, b)| a * b).sum::<f64>();
        let gu = &mut grad[1 + i * m..1 + (i + 1) * m];
        let mut next = adj.clone();
        match kind {
            ProblemKind::Tabletop => {
                gu[0] = dt * adj[0];
                gu[1] = dt * adj[1];
            }
            ProblemKind::TwoCar => {
                for car in 0..2 {
                    let b = 4 * car;
                    let (v, th) = (s[b + 2], s[b + 3]);
                    let (sin, cos) = th.sin_cos();
                    gu[2 * car] = dt * adj[b + 2];
                    gu[2 * car + 1] = dt * adj[b + 3];
                    next[b + 2] += dt * (cos * adj[b] + sin * adj[b + 1]);
                    next[b + 3] += dt * v * (-sin * adj[b] + cos * adj[b + 1]);
                }
            }
        }
        for (a, g) in next.iter_mut().zip(&state_grads[i * d..(i + 1) * d]) {
            *a += g;
        }
        adj = next;
    }
    grad[0] = grad_dt / n as f64;
    grad
}

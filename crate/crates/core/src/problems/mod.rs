//! Benchmark problem families: tabletop end-effector reaching and two-car
//! reach-avoid.
//!
//! Both problems minimize final time over a decision vector
//! `x = (t, u_1, ..., u_N)` of length 161, subject to obstacle avoidance
//! inequalities and terminal goal equalities evaluated on an explicit-Euler
//! rollout of the dynamics.

mod constraints;
mod dynamics;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub use constraints::{
    constraint_vjp, evaluate_constraints, evaluate_objective, violation, violation_from_values,
    violation_gradient, ConstraintValues, ViolationBreakdown, ViolationReport,
};
pub use dynamics::{rollout, Trajectory};
pub(crate) use constraints::{
    constraints_of, violation_and_gradient_raw, violation_raw, vjp_with_traj,
};
pub(crate) use dynamics::rollout_raw;

/// Half width of the square workspace `[-4, 4]^2`, meters.
pub const WORKSPACE_HALF_WIDTH: f64 = 4.0;
/// Final-time box, seconds.
pub const T_MIN: f64 = 4.0;
pub const T_MAX: f64 = 20.0;
/// Length of the decision vector for both problem kinds.
pub const DECISION_DIM: usize = 161;
/// Collision margin added to every obstacle radius.
pub const COLLISION_MARGIN: f64 = 0.0;
/// Minimum separation between the two cars, meters.
pub const CAR_SAFE_DISTANCE: f64 = 0.5;

/// Which benchmark a problem instance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Tabletop,
    TwoCar,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 2] = [ProblemKind::Tabletop, ProblemKind::TwoCar];

    /// Number of Euler steps.
    pub fn n_steps(self) -> usize {
        match self {
            ProblemKind::Tabletop => 80,
            ProblemKind::TwoCar => 40,
        }
    }

    /// Control inputs per step.
    pub fn control_dim(self) -> usize {
        match self {
            ProblemKind::Tabletop => 2,
            ProblemKind::TwoCar => 4,
        }
    }

    /// Full state dimension (both cars stacked for two-car).
    pub fn state_dim(self) -> usize {
        match self {
            ProblemKind::Tabletop => 2,
            ProblemKind::TwoCar => 8,
        }
    }

    pub fn n_agents(self) -> usize {
        match self {
            ProblemKind::Tabletop => 1,
            ProblemKind::TwoCar => 2,
        }
    }

    pub fn n_obstacles(self) -> usize {
        match self {
            ProblemKind::Tabletop => 4,
            ProblemKind::TwoCar => 2,
        }
    }

    pub fn radius_range(self) -> (f64, f64) {
        match self {
            ProblemKind::Tabletop => (0.3, 1.0),
            ProblemKind::TwoCar => (0.5, 1.5),
        }
    }

    /// Inequalities per knot: one per (agent, obstacle) plus the inter-car
    /// separation for two-car.
    pub fn inequalities_per_step(self) -> usize {
        match self {
            ProblemKind::Tabletop => 4,
            ProblemKind::TwoCar => 2 * 2 + 1,
        }
    }

    pub fn n_inequalities(self) -> usize {
        self.n_steps() * self.inequalities_per_step()
    }

    pub fn n_equalities(self) -> usize {
        2 * self.n_agents()
    }

    /// Fixed initial state.
    pub fn start_state(self) -> Vec<f64> {
        match self {
            ProblemKind::Tabletop => vec![0.0, 0.0],
            ProblemKind::TwoCar => vec![
                -4.0,
                0.0,
                0.0,
                0.0,
                0.0,
                -4.0,
                0.0,
                std::f64::consts::FRAC_PI_2,
            ],
        }
    }

    /// Start position of each agent.
    pub fn start_positions(self) -> Vec<[f64; 2]> {
        let s = self.start_state();
        match self {
            ProblemKind::Tabletop => vec![[s[0], s[1]]],
            ProblemKind::TwoCar => vec![[s[0], s[1]], [s[4], s[5]]],
        }
    }

    /// Box bounds on every decision-vector component, physical units.
    pub fn bounds(self) -> Bounds {
        let mut lower = vec![-1.0; DECISION_DIM];
        let mut upper = vec![1.0; DECISION_DIM];
        lower[0] = T_MIN;
        upper[0] = T_MAX;
        Bounds { lower, upper }
    }

    /// Length of the flattened, scaled condition vector.
    pub fn condition_dim(self) -> usize {
        3 * self.n_obstacles() + 2 * self.n_agents()
    }

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Tabletop => "tabletop",
            ProblemKind::TwoCar => "two_car",
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tabletop" => Ok(ProblemKind::Tabletop),
            "two_car" | "twocar" => Ok(ProblemKind::TwoCar),
            other => Err(Error::Config(format!("unknown problem kind '{other}'"))),
        }
    }
}

/// Per-component box in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.lower[i] + self.upper[i])
    }

    pub fn half_width(&self, i: usize) -> f64 {
        0.5 * (self.upper[i] - self.lower[i])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }
}

/// The condition `y` of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub kind: ProblemKind,
    pub goals: Vec<[f64; 2]>,
    pub obstacle_centers: Vec<[f64; 2]>,
    pub obstacle_radii: Vec<f64>,
}

impl ProblemParams {
    /// Structural check: counts match the kind and numbers are finite.
    /// Test fixtures may carry fewer obstacles than sampled instances.
    pub fn validate(&self) -> Result<()> {
        if self.goals.len() != self.kind.n_agents() {
            return Err(Error::Config(format!(
                "{} expects {} goal(s), got {}",
                self.kind,
                self.kind.n_agents(),
                self.goals.len()
            )));
        }
        if self.obstacle_centers.len() != self.obstacle_radii.len() {
            return Err(Error::Config(
                "obstacle centers and radii differ in length".into(),
            ));
        }
        let finite = self
            .goals
            .iter()
            .chain(&self.obstacle_centers)
            .flatten()
            .chain(&self.obstacle_radii)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NumericInput("non-finite problem parameter".into()));
        }
        Ok(())
    }

    /// The condition vector with positions divided by the workspace half
    /// width and radii mapped affinely from their sampling range, so every
    /// component of a valid instance lies in `[-1, 1]`.
    ///
    /// Layout: goals, obstacle centers, obstacle radii. Missing obstacles
    /// (test fixtures) are encoded as zeros.
    pub fn scaled_condition(&self) -> Vec<f64> {
        let kind = self.kind;
        let (r_lo, r_hi) = kind.radius_range();
        let mut out = Vec::with_capacity(kind.condition_dim());
        for g in &self.goals {
            out.push(g[0] / WORKSPACE_HALF_WIDTH);
            out.push(g[1] / WORKSPACE_HALF_WIDTH);
        }
        for j in 0..kind.n_obstacles() {
            let c = self.obstacle_centers.get(j).copied().unwrap_or([0.0, 0.0]);
            out.push(c[0] / WORKSPACE_HALF_WIDTH);
            out.push(c[1] / WORKSPACE_HALF_WIDTH);
        }
        for j in 0..kind.n_obstacles() {
            let v = match self.obstacle_radii.get(j) {
                Some(r) => 2.0 * (r - r_lo) / (r_hi - r_lo) - 1.0,
                None => 0.0,
            };
            out.push(v);
        }
        out
    }
}

/// Controls the rejection sampler behind [`sample_problem_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementConfig {
    /// Inflation of the start/goal bounding box, meters.
    pub region_margin: f64,
    pub max_attempts: usize,
    /// Overrides the kind's radius range.
    pub radius_range: Option<(f64, f64)>,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            region_margin: 1.0,
            max_attempts: 10_000,
            radius_range: None,
        }
    }
}

const TABLE_CORNERS: [[f64; 2]; 4] = [[4.0, 4.0], [-4.0, 4.0], [-4.0, -4.0], [4.0, -4.0]];

/// Samples a problem instance deterministically from `seed`.
pub fn sample_problem_params(seed: u64, kind: ProblemKind) -> Result<ProblemParams> {
    sample_problem_params_with(seed, kind, &PlacementConfig::default())
}

pub fn sample_problem_params_with(
    seed: u64,
    kind: ProblemKind,
    cfg: &PlacementConfig,
) -> Result<ProblemParams> {
    let mut rng = rng_for(seed, &[]);
    let starts = kind.start_positions();
    let goals: Vec<[f64; 2]> = match kind {
        ProblemKind::Tabletop => vec![TABLE_CORNERS[rng.random_range(0..4)]],
        ProblemKind::TwoCar => vec![[4.0, 0.0], [0.0, 4.0]],
    };
    let (r_lo, r_hi) = cfg.radius_range.unwrap_or(kind.radius_range());

    let anchors: Vec<[f64; 2]> = starts.iter().chain(&goals).copied().collect();
    let w = WORKSPACE_HALF_WIDTH;
    let mut region = [[f64::INFINITY, f64::NEG_INFINITY]; 2];
    for p in &anchors {
        for (axis, r) in region.iter_mut().enumerate() {
            r[0] = r[0].min(p[axis] - cfg.region_margin).max(-w);
            r[1] = r[1].max(p[axis] + cfg.region_margin).min(w);
        }
    }

    let n = kind.n_obstacles();
    for _ in 0..cfg.max_attempts {
        let mut centers = Vec::with_capacity(n);
        let mut radii = Vec::with_capacity(n);
        for _ in 0..n {
            let cx = rng.random_range(region[0][0]..region[0][1]);
            let cy = rng.random_range(region[1][0]..region[1][1]);
            centers.push([cx, cy]);
            radii.push(rng.random_range(r_lo..=r_hi));
        }
        let inside = centers
            .iter()
            .all(|c| c[0].abs() < w && c[1].abs() < w);
        let clear_of_anchors = centers.iter().zip(&radii).all(|(c, r)| {
            anchors
                .iter()
                .all(|p| dist(*c, *p) > *r + COLLISION_MARGIN)
        });
        let blocks_path = match kind {
            ProblemKind::Tabletop => centers
                .iter()
                .zip(&radii)
                .any(|(c, r)| segment_distance(*c, starts[0], goals[0]) < *r),
            ProblemKind::TwoCar => true,
        };
        if inside && clear_of_anchors && blocks_path {
            return Ok(ProblemParams {
                kind,
                goals,
                obstacle_centers: centers,
                obstacle_radii: radii,
            });
        }
    }
    Err(Error::PlacementFailure {
        attempts: cfg.max_attempts,
    })
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to the segment `a`-`b`.
pub(crate) fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let s = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + s * ab[0], a[1] + s * ab[1]])
}

/// Final time followed by the flattened control sequence.
///
/// Tabletop controls are `(u_x, u_y)` per step; two-car controls are
/// `(a_1, omega_1, a_2, omega_2)` per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl DecisionVector {
    pub fn physical(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn normalized(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: true,
        }
    }

    /// Builds a physical vector from a final time and a control sequence.
    pub fn from_parts(t_final: f64, controls: &[f64]) -> Self {
        let mut values = Vec::with_capacity(1 + controls.len());
        values.push(t_final);
        values.extend_from_slice(controls);
        Self::physical(values)
    }

    /// Constant control applied at every step.
    pub fn constant(kind: ProblemKind, t_final: f64, control: &[f64]) -> Self {
        assert_eq!(control.len(), kind.control_dim());
        let controls: Vec<f64> = control
            .iter()
            .copied()
            .cycle()
            .take(kind.n_steps() * kind.control_dim())
            .collect();
        Self::from_parts(t_final, &controls)
    }

    pub fn t_final(&self) -> f64 {
        self.values[0]
    }

    pub fn controls(&self) -> &[f64] {
        &self.values[1..]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check_dim(&self) -> Result<()> {
        if self.values.len() != DECISION_DIM {
            return Err(Error::Shape {
                expected: DECISION_DIM,
                got: self.values.len(),
            });
        }
        Ok(())
    }

    /// Maps a physical vector to `[-1, 1]` per component. Components outside
    /// their box are clamped first; the returned flag reports whether that
    /// happened.
    pub fn normalize(&self, kind: ProblemKind) -> Result<(DecisionVector, bool)> {
        if self.normalized {
            return Err(Error::Config("vector is already normalized".into()));
        }
        self.check_dim()?;
        let b = kind.bounds();
        let mut clamped = false;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = v.clamp(b.lower[i], b.upper[i]);
                if c != v {
                    clamped = true;
                }
                (c - b.center(i)) / b.half_width(i)
            })
            .collect();
        if clamped {
            log::warn!("normalize: decision vector outside its box was clamped");
        }
        Ok((DecisionVector::normalized(values), clamped))
    }

    /// Inverse of [`normalize`](Self::normalize). Values outside `[-1, 1]`
    /// (noisy diffusion iterates) map affinely outside the box.
    pub fn denormalize(&self, kind: ProblemKind) -> Result<DecisionVector> {
        if !self.normalized {
            return Err(Error::Config("vector is not normalized".into()));
        }
        self.check_dim()?;
        Ok(DecisionVector::physical(denormalize_slice(kind, &self.values)))
    }
}

pub(crate) fn denormalize_slice(kind: ProblemKind, z: &[f64]) -> Vec<f64> {
    let b = kind.bounds();
    z.iter()
        .enumerate()
        .map(|(i, v)| b.center(i) + b.half_width(i) * v)
        .collect()
}

/// Derivative of the physical vector with respect to the normalized one.
pub fn normalization_scale(kind: ProblemKind) -> Vec<f64> {
    let b = kind.bounds();
    (0..DECISION_DIM).map(|i| b.half_width(i)).collect()
}

/// Uniform draw over the physical boxes.
pub fn uniform_decision<R: Rng + ?Sized>(kind: ProblemKind, rng: &mut R) -> DecisionVector {
    let b = kind.bounds();
    let values = (0..DECISION_DIM)
        .map(|i| rng.random_range(b.lower[i]..=b.upper[i]))
        .collect();
    DecisionVector::physical(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_problem_params(7, ProblemKind::Tabletop).unwrap();
        let b = sample_problem_params(7, ProblemKind::Tabletop).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_problem_params(8, ProblemKind::Tabletop).unwrap());
    }

    #[test]
    fn tabletop_invariants_hold() {
        for seed in 0..200 {
            let p = sample_problem_params(seed, ProblemKind::Tabletop).unwrap();
            assert_eq!(p.obstacle_radii.len(), 4);
            assert!(p.obstacle_radii.iter().all(|r| (0.3..=1.0).contains(r)));
            assert!(TABLE_CORNERS.contains(&p.goals[0]));
            let start = [0.0, 0.0];
            assert!(p
                .obstacle_centers
                .iter()
                .zip(&p.obstacle_radii)
                .any(|(c, r)| segment_distance(*c, start, p.goals[0]) < *r));
            for (c, r) in p.obstacle_centers.iter().zip(&p.obstacle_radii) {
                assert!(c[0].abs() < 4.0 && c[1].abs() < 4.0);
                assert!(dist(*c, start) > *r);
                assert!(dist(*c, p.goals[0]) > *r);
            }
            assert!(p.scaled_condition().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn two_car_invariants_hold() {
        for seed in 0..200 {
            let p = sample_problem_params(seed, ProblemKind::TwoCar).unwrap();
            assert_eq!(p.obstacle_radii.len(), 2);
            assert!(p.obstacle_radii.iter().all(|r| (0.5..=1.5).contains(r)));
            for (c, r) in p.obstacle_centers.iter().zip(&p.obstacle_radii) {
                for a in [[-4.0, 0.0], [0.0, -4.0], [4.0, 0.0], [0.0, 4.0]] {
                    assert!(dist(*c, a) > *r);
                }
            }
            assert_eq!(p.scaled_condition().len(), ProblemKind::TwoCar.condition_dim());
        }
    }

    #[test]
    fn corner_frequencies_are_uniform() {
        let mut counts = [0usize; 4];
        for seed in 0..1000 {
            let p = sample_problem_params(seed, ProblemKind::Tabletop).unwrap();
            let idx = TABLE_CORNERS.iter().position(|c| *c == p.goals[0]).unwrap();
            counts[idx] += 1;
        }
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((f - 0.25).abs() <= 0.05, "corner frequency {f}");
        }
    }

    #[test]
    fn impossible_placement_reports_failure() {
        let cfg = PlacementConfig {
            radius_range: Some((5.0, 6.0)),
            max_attempts: 50,
            ..PlacementConfig::default()
        };
        let err = sample_problem_params_with(3, ProblemKind::Tabletop, &cfg).unwrap_err();
        assert!(matches!(err, Error::PlacementFailure { attempts: 50 }));
    }

    #[test]
    fn normalization_endpoints() {
        let kind = ProblemKind::Tabletop;
        let mut x = DecisionVector::constant(kind, T_MIN, &[0.0, 1.0]);
        let (z, clamped) = x.normalize(kind).unwrap();
        assert!(!clamped);
        assert_eq!(z.values[0], -1.0);
        assert_eq!(z.values[1], 0.0);
        assert_eq!(z.values[2], 1.0);
        x.values[0] = T_MAX;
        assert_eq!(x.normalize(kind).unwrap().0.values[0], 1.0);
    }

    #[test]
    fn normalization_clamps_out_of_box_input() {
        let kind = ProblemKind::TwoCar;
        let x = DecisionVector::constant(kind, 30.0, &[2.0, 0.0, 0.0, -3.0]);
        let (z, clamped) = x.normalize(kind).unwrap();
        assert!(clamped);
        assert_eq!(z.values[0], 1.0);
        assert_eq!(z.values[1], 1.0);
        assert_eq!(z.values[4], -1.0);
    }

    #[test]
    fn normalization_rejects_flag_mismatch() {
        let kind = ProblemKind::Tabletop;
        let x = DecisionVector::constant(kind, 8.0, &[0.0, 0.0]);
        assert!(x.denormalize(kind).is_err());
        let z = x.normalize(kind).unwrap().0;
        assert!(z.normalize(kind).is_err());
    }

    #[test]
    fn params_json_schema() {
        let p = sample_problem_params(1, ProblemKind::TwoCar).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["goals", "kind", "obstacle_centers", "obstacle_radii"]);
        assert_eq!(obj["kind"], "two_car");
        let back: ProblemParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_round_trip(seed in any::<u64>(), two_car in any::<bool>()) {
                let kind = if two_car { ProblemKind::TwoCar } else { ProblemKind::Tabletop };
                let x = uniform_decision(kind, &mut rng_for(seed, &[]));
                let (z, clamped) = x.normalize(kind).unwrap();
                prop_assert!(!clamped);
                prop_assert!(z.values.iter().all(|v| v.abs() <= 1.0));
                let back = z.denormalize(kind).unwrap();
                for (a, b) in back.values.iter().zip(&x.values) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

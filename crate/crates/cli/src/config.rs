//! Run configuration: profile defaults, then an optional TOML file, then
//! command-line flags, each layer overriding the previous one.

use std::path::Path;

use anyhow::{Context, Result};
use cadiff_core::align::Reweighting;
use cadiff_core::config::Profile;
use cadiff_core::denoiser::Architecture;
use cadiff_core::diffusion::{GuidanceConfig, ScheduleParams};
use cadiff_core::problems::ProblemKind;
use cadiff_core::solver::SolveConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_instances: usize,
    pub solves_per_instance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the violation term in constrained mode.
    pub lambda: f64,
    pub reweighting: Reweighting,
    pub architecture: Architecture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSection {
    /// Corruptions per record and step.
    pub n_noise: usize,
    /// Records drawn from the dataset.
    pub m_data: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Held-out instances, sampled from `instance_seed` like a dataset.
    pub n_instances: usize,
    pub per_instance: usize,
    pub instance_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub profile: Profile,
    pub seed: u64,
    pub data: DataSection,
    pub solve: SolveConfig,
    pub schedule: ScheduleParams,
    pub train: TrainSection,
    pub guidance: GuidanceConfig,
    pub gt: GtSection,
    pub sample: SampleSection,
    /// Feasibility tolerance used by the metrics.
    pub feas_tol: f64,
}

/// Master seed of the held-out instances, distinct from any dataset seed a
/// user is likely to pick.
pub const HELD_OUT_INSTANCE_SEED: u64 = 1_000_003;

impl RunConfig {
    pub fn defaults(problem: ProblemKind, profile: Profile) -> Self {
        let d = profile.defaults(problem);
        Self {
            problem,
            profile,
            seed: 0,
            data: DataSection {
                n_instances: d.n_instances,
                solves_per_instance: d.solves_per_instance,
            },
            solve: SolveConfig::default(),
            schedule: d.schedule,
            train: TrainSection {
                epochs: d.epochs,
                batch_size: 128,
                learning_rate: d.learning_rate,
                lambda: 0.1,
                reweighting: Reweighting::PerStep,
                architecture: d.architecture,
            },
            guidance: GuidanceConfig::default(),
            gt: GtSection {
                n_noise: 100,
                m_data: 128,
            },
            sample: SampleSection {
                n_instances: 32,
                per_instance: 16,
                instance_seed: HELD_OUT_INSTANCE_SEED,
            },
            feas_tol: 1e-4,
        }
    }
}

/// One flag value addressed by its dotted key, e.g. `train.epochs`.
pub type Override = (&'static str, Value);

/// Collects `Some` flag values into overrides.
pub fn overrides<const N: usize>(pairs: [(&'static str, Option<Value>); N]) -> Vec<Override> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))).collect()
}

pub fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| cadiff_core::Error::Io {
            path: path.into(),
            source: e,
        })?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| UsageError(format!("{}: {}", path.display(), e.message())))?;
    Ok(serde_json::to_value(table).context("converting the config file")?)
}

fn merge(base: &mut Value, patch: &Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (key, pv) in p {
                let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
                let Some(bv) = b.get_mut(key) else {
                    return Err(UsageError(format!("unknown config key '{path}'")).into());
                };
                // Tagged enums are replaced whole rather than merged.
                if bv.is_object() && pv.is_object() && !pv.as_object().is_some_and(|o| o.contains_key("type")) {
                    merge(bv, pv, &path)?;
                } else {
                    *bv = pv.clone();
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let mut patch = value;
    for key in dotted.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, &patch, "")
}

fn top_level<T: for<'de> Deserialize<'de>>(file: Option<&Value>, key: &str) -> Result<Option<T>> {
    let Some(v) = file.and_then(|f| f.get(key)) else {
        return Ok(None);
    };
    serde_json::from_value(v.clone())
        .map(Some)
        .map_err(|e| UsageError(format!("config key '{key}': {e}")).into())
}

/// Resolves the configuration.
///
/// The problem kind comes from the flag, the file, or an input artifact
/// (`inferred`); any two of these that disagree are a configuration error.
pub fn resolve(
    problem_flag: Option<ProblemKind>,
    profile_flag: Option<Profile>,
    file: Option<&Value>,
    inferred: Option<ProblemKind>,
    flags: &[Override],
) -> Result<RunConfig> {
    let from_file: Option<ProblemKind> = top_level(file, "problem")?;
    let mut problem = None;
    for candidate in [problem_flag, from_file, inferred].into_iter().flatten() {
        match problem {
            None => problem = Some(candidate),
            Some(p) if p != candidate => {
                return Err(cadiff_core::Error::Config(format!(
                    "problem kind mismatch: {p} vs {candidate}"
                ))
                .into())
            }
            Some(_) => {}
        }
    }
    let problem = problem.ok_or_else(|| UsageError("--problem is required".into()))?;
    let profile = match profile_flag {
        Some(p) => p,
        None => top_level(file, "profile")?.unwrap_or(Profile::Desk),
    };
    let mut value = serde_json::to_value(RunConfig::defaults(problem, profile)).expect("config serializes");
    if let Some(f) = file {
        merge(&mut value, f, "")?;
    }
    for (key, v) in flags {
        set_path(&mut value, key, v.clone())?;
    }
    set_path(&mut value, "problem", serde_json::to_value(problem)?)?;
    set_path(&mut value, "profile", serde_json::to_value(profile)?)?;
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
    cfg.solve.validate()?;
    cfg.guidance.validate()?;
    cfg.train.architecture.validate()?;
    cfg.schedule.build()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn layers_apply_in_order() {
        let file = json!({"seed": 4, "train": {"epochs": 7, "learning_rate": 0.01}});
        let flags = overrides([("train.epochs", Some(json!(3))), ("seed", None)]);
        let cfg = resolve(Some(ProblemKind::Tabletop), None, Some(&file), None, &flags).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.schedule.k_steps, 100);
        assert_eq!(cfg.data.n_instances, 200);
    }

    #[test]
    fn profile_sets_defaults() {
        let cfg = resolve(Some(ProblemKind::TwoCar), Some(Profile::Paper), None, None, &[]).unwrap();
        assert_eq!(cfg.schedule.k_steps, 500);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.data.n_instances, 3000);
    }

    #[test]
    fn tagged_values_replace_whole() {
        let file = json!({"train": {"reweighting": {"type": "per_sample", "n_draws": 4}}});
        let cfg = resolve(Some(ProblemKind::Tabletop), None, Some(&file), None, &[]).unwrap();
        assert_eq!(cfg.train.reweighting, Reweighting::PerSample { n_draws: 4 });
    }

    #[test]
    fn rejects_unknown_keys_and_kind_conflicts() {
        let bad = json!({"train": {"epoch": 3}});
        let e = resolve(Some(ProblemKind::Tabletop), None, Some(&bad), None, &[]).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        let e = resolve(Some(ProblemKind::Tabletop), None, None, Some(ProblemKind::TwoCar), &[]).unwrap_err();
        assert!(e.to_string().contains("mismatch"));
        assert!(resolve(None, None, None, None, &[]).is_err());
        let file = json!({"problem": "two_car"});
        let cfg = resolve(None, None, Some(&file), None, &[]).unwrap();
        assert_eq!(cfg.problem, ProblemKind::TwoCar);
    }
}

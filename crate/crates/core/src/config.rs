//! Run profiles: the desk-scale defaults used by the CLI and the
//! full-scale `paper` profile.

use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchProfile, Architecture};
use crate::diffusion::ScheduleParams;
use crate::problems::ProblemKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("unknown profile {s:?} (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDefaults {
    pub schedule: ScheduleParams,
    pub n_instances: usize,
    pub solves_per_instance: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub training_seeds: usize,
    pub architecture: Architecture,
}

impl Profile {
    /// Desk: `K = 100` with the linear schedule's endpoints scaled by
    /// `1000 / K` so that `alpha_bar_K` is close to zero, and a larger
    /// learning rate so that the small dataset trains within minutes. Paper:
    /// `K = 500` with the standard `(1e-4, 0.02)` endpoints.
    pub fn defaults(self, kind: ProblemKind) -> ProfileDefaults {
        match self {
            Profile::Desk => ProfileDefaults {
                schedule: ScheduleParams {
                    k_steps: 100,
                    beta_start: 1e-3,
                    beta_end: 0.2,
                },
                n_instances: match kind {
                    ProblemKind::Tabletop => 200,
                    ProblemKind::TwoCar => 150,
                },
                solves_per_instance: match kind {
                    ProblemKind::Tabletop => 50,
                    ProblemKind::TwoCar => 40,
                },
                epochs: 200,
                learning_rate: 1e-3,
                training_seeds: 2,
                architecture: Architecture::for_profile(ArchProfile::Desk),
            },
            Profile::Paper => ProfileDefaults {
                schedule: ScheduleParams {
                    k_steps: 500,
                    beta_start: 1e-4,
                    beta_end: 0.02,
                },
                n_instances: match kind {
                    ProblemKind::Tabletop => 2700,
                    ProblemKind::TwoCar => 3000,
                },
                solves_per_instance: match kind {
                    ProblemKind::Tabletop => 100,
                    ProblemKind::TwoCar => 50,
                },
                epochs: 200,
                learning_rate: 1e-4,
                training_seeds: 3,
                architecture: Architecture::for_profile(ArchProfile::Paper),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_schedule_ends_near_pure_noise() {
        for kind in ProblemKind::ALL {
            let s = Profile::Desk.defaults(kind).schedule.build().unwrap();
            assert!(s.alpha_bar(s.k_steps()) < 1e-4);
            let p = Profile::Paper.defaults(kind).schedule.build().unwrap();
            assert!(p.alpha_bar(p.k_steps()) < 0.01);
        }
    }
}

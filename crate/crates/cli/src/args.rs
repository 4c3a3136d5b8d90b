use std::path::PathBuf;

use cadiff_core::config::Profile;
use cadiff_core::problems::ProblemKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cadiff", version, about = "Constraint-aligned diffusion for trajectory optimization")]
pub struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "CADIFF_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve random instances and write the feasible, filtered solutions.
    GenData(GenDataArgs),
    /// Tabulate the violation of forward-corrupted data per diffusion step.
    AnalyzeGt(AnalyzeGtArgs),
    /// Train a noise-prediction model.
    Train(TrainArgs),
    /// Draw decision vectors on held-out instances.
    Sample(SampleArgs),
    /// Violation statistics of sample files.
    Eval(EvalArgs),
    /// Solver statistics when warm-starting from sample files.
    WarmStart(WarmStartArgs),
    /// Merge reports and write plotting data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub problem: Option<ProblemKind>,
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_instances: Option<usize>,
    #[arg(long)]
    pub solves_per_instance: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeGtArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: PathBuf,
    /// CSV output; the sidecar goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Corruptions per record and step (N).
    #[arg(long)]
    pub n_noise: Option<usize>,
    /// Records drawn from the dataset (M).
    #[arg(long)]
    pub m_data: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReweightingArg {
    PerStep,
    PerSample,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Required in constrained mode.
    #[arg(long)]
    pub gt_table: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub reweighting: Option<ReweightingArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Checkpoint output; also writes `<out>.json` and `<out>.log.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Uniform,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "method"]))]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample from a baseline instead of a model.
    #[arg(long, value_enum)]
    pub method: Option<BaselineArg>,
    /// Method name written to the samples (default: the training mode).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub n_instances: Option<usize>,
    #[arg(long)]
    pub per_instance: Option<usize>,
    #[arg(long)]
    pub instance_seed: Option<u64>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required = true, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// Ground-truth table used in training, recorded in the report.
    #[arg(long)]
    pub gt_table: Option<PathBuf>,
    #[arg(long)]
    pub feas_tol: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WarmStartArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required = true, num_args = 1..)]
    pub samples: Vec<PathBuf>,
    /// Guesses used per instance and method (default: every sample).
    #[arg(long)]
    pub per_instance: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Reports from `eval` and `warm-start`.
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Ground-truth table to export as a per-step curve.
    #[arg(long)]
    pub gt_table: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

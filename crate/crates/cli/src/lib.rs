//! The `cadiff` command-line pipeline: data generation, ground-truth
//! analysis, training, sampling and evaluation.

pub mod args;
pub mod commands;
pub mod config;
pub mod samples;

use std::path::Path;

use serde::Serialize;

/// A command-line usage problem (missing or conflicting options).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code and category for an error: 2 for usage, configuration and
/// input-file problems, 1 for failures during a run.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    if err.downcast_ref::<UsageError>().is_some() {
        return (2, "usage");
    }
    if let Some(e) = err.downcast_ref::<cadiff_core::Error>() {
        use cadiff_core::Error::*;
        let code = match e {
            Config(_) | Incompatible { .. } | Io { .. } | Json { .. } | Shape { .. } => 2,
            _ => 1,
        };
        return (code, e.kind());
    }
    if err.downcast_ref::<serde_json::Error>().is_some() {
        return (2, "json");
    }
    (1, "internal")
}

/// The single machine-parsable error line printed on failure.
pub fn error_line(kind: &str, msg: &str) -> String {
    let flat: Vec<&str> = msg.split_whitespace().collect();
    format!("error: kind={kind} msg={}", flat.join(" "))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(role: &str, path: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            role: role.into(),
            path: path.display().to_string(),
            sha256: cadiff_core::persist::sha256_file(path)?,
        })
    }
}

/// Written beside every output as `<out>.run.json`: enough to re-run the
/// producing command.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Command-specific resolved settings (for example the training config).
    pub effective: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
}

pub fn run_json_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    s.into()
}

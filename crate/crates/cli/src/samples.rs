//! Sample files: JSON lines, one decision vector per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use cadiff_core::problems::{ProblemParams, DECISION_DIM};
use cadiff_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// `vanilla`, `constrained`, `uniform`, or a user label.
    pub method: String,
    /// Training seed of the model (sampling seed for `uniform`).
    pub seed: u64,
    pub instance: usize,
    pub index: usize,
    pub params: ProblemParams,
    /// Physical units.
    pub x: Vec<f64>,
}

pub fn save_samples(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<SampleRecord>> {
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Incompatible {
            path: path.into(),
            reason: format!("line {}: {reason}", n + 1),
        };
        let r: SampleRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if r.x.len() != DECISION_DIM {
            return Err(bad(format!("x has {} components", r.x.len())).into());
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cadiff_core::problems::{sample_problem_params, ProblemKind};

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<SampleRecord> = (0..3)
            .map(|i| SampleRecord {
                method: "uniform".into(),
                seed: 5,
                instance: i,
                index: 0,
                params: sample_problem_params(i as u64, ProblemKind::TwoCar).unwrap(),
                x: (0..DECISION_DIM).map(|j| j as f64 / 7.0).collect(),
            })
            .collect();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_samples(&a, &recs).unwrap();
        let back = load_samples(&a).unwrap();
        assert_eq!(back, recs);
        save_samples(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        std::fs::write(&a, "{\"method\": 1}\n").unwrap();
        let e = load_samples(&a).unwrap_err();
        assert!(matches!(e.downcast_ref::<Error>(), Some(Error::Incompatible { .. })));
    }
}

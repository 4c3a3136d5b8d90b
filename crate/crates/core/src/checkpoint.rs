//! Model checkpoints.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CADIFFW\0"
//! version      u32
//! header_len   u32
//! header       header_len bytes of compact JSON (CheckpointHeader)
//! n_tensors    u32
//! per tensor:  name_len u32, name (UTF-8), ndim u32, dims u64 x ndim,
//!              data f32 x prod(dims)
//! ```
//!
//! A JSON sidecar `<path>.json` repeats the header for inspection. Weights
//! are stored as `f32`; training rounds to `f32` so saving is lossless.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchProfile, Architecture, Denoiser, TrainMode};
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::problems::ProblemKind;

pub const MAGIC: &[u8; 8] = b"CADIFFW\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ProblemKind,
    pub profile: ArchProfile,
    pub architecture: Architecture,
    pub schedule: ScheduleParams,
    pub seed: u64,
    pub mode: TrainMode,
    pub lambda: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, model: &Denoiser, header: &CheckpointHeader) -> Result<()> {
    if header.kind != model.kind() || &header.architecture != model.architecture() {
        return Err(Error::Config("checkpoint header does not describe the model".into()));
    }
    let head = serde_json::to_vec(header).map_err(|e| Error::json(path, e))?;
    let mut buf = Vec::with_capacity(64 + head.len() + 4 * model.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.len() as u32).to_le_bytes());
    buf.extend_from_slice(&head);
    let specs = model.tensor_specs();
    buf.extend_from_slice(&(specs.len() as u32).to_le_bytes());
    for s in specs {
        buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.name.as_bytes());
        buf.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for d in &s.shape {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &model.params()[s.offset..s.offset + s.len()] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    crate::persist::write_json(&sidecar_path(path), header)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::incompatible(
                self.path,
                format!("truncated at byte {} (needed {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint, rejecting wrong magic, versions, truncation and
/// tensors that do not match the declared architecture.
pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::incompatible(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::incompatible(path, format!("version {version}, expected {VERSION}")));
    }
    let head_len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(head_len)?)
        .map_err(|e| Error::incompatible(path, format!("bad header: {e}")))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::incompatible(path, "tensor name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let len = len
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::incompatible(path, "tensor size overflows"))?;
        let data = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::incompatible(path, "trailing bytes after the last tensor"));
    }
    let model = Denoiser::from_tensors(header.kind, header.architecture.clone(), &tensors)
        .map_err(|e| Error::incompatible(path, e.to_string()))?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(kind: ProblemKind, arch: Architecture) -> CheckpointHeader {
        CheckpointHeader {
            kind,
            profile: arch.profile,
            architecture: arch,
            schedule: ScheduleParams {
                k_steps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            seed: 9,
            mode: TrainMode::Vanilla,
            lambda: 0.0,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Denoiser::new(ProblemKind::Tabletop, Architecture::desk(), 3).unwrap();
        m.round_to_f32();
        let h = header(ProblemKind::Tabletop, Architecture::desk());
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&a, &m, &h).unwrap();
        let (back, hb) = load_checkpoint(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(hb, h);
        save_checkpoint(&b, &back, &hb).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(fs::read(sidecar_path(&a)).unwrap(), fs::read(sidecar_path(&b)).unwrap());
    }

    #[test]
    fn corrupt_files_are_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::new(ProblemKind::TwoCar, Architecture::desk(), 1).unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, &header(ProblemKind::TwoCar, Architecture::desk())).unwrap();
        let full = fs::read(&p).unwrap();
        for cut in [0, 5, 12, 40, full.len() / 2, full.len() - 1] {
            fs::write(&p, &full[..cut]).unwrap();
            assert!(matches!(load_checkpoint(&p), Err(Error::Incompatible { .. })), "cut {cut}");
        }
        let mut bad = full.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Incompatible { .. })));
        let mut newer = full.clone();
        newer[8] = 2;
        fs::write(&p, &newer).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Incompatible { .. })));
        let mut extra = full;
        extra.push(0);
        fs::write(&p, &extra).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Incompatible { .. })));
    }
}

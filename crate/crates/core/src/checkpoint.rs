//! Checkpoint container: a flat little-endian file of named `f64` arrays
//! plus a JSON sidecar (`<stem>.meta.json`) echoing the model config.
//!
//! Layout: magic `SVCKPT\0\x01`, `u32` entry count, then per entry a `u32`
//! name length, UTF-8 name, `u32` rank, `u64` extents, and the values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelHandle, ParamSet, Phase, Tensor};

const MAGIC: &[u8; 8] = b"SVCKPT\0\x01";
pub const FORMAT: &str = "supervessel-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub config: ModelConfig,
    pub phase: Phase,
    pub parameter_count: usize,
    pub created: String,
    /// `sha256:` of `"blob <len>\0" + container bytes`, as git hashes objects.
    pub content_hash: String,
}

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Validation("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Validation("not a checkpoint (bad magic)".into()));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Validation("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Validation("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Validation("trailing bytes after checkpoint entries".into()));
    }
    Ok(params)
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("sha256:{}", hex::encode(h.finalize()))
}

/// `runs/a/best.ckpt` -> `runs/a/best.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Checks that the parameter inventory matches what the config and phase
/// imply, name by name and shape by shape.
pub fn check_compatible(handle: &ModelHandle) -> Result<()> {
    let reference = crate::model::build_model(&handle.config, 0)?;
    let reference = match handle.phase {
        Phase::Train => reference,
        Phase::Test => reference.strip_for_test(),
    };
    if reference.params.len() != handle.params.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, config implies {}",
            handle.params.len(),
            reference.params.len()
        )));
    }
    for (name, t) in reference.params.iter() {
        let got = handle.params.get(name)?;
        if got.shape != t.shape {
            return Err(Error::Config(format!(
                "`{name}` has shape {:?}, config implies {:?}",
                got.shape, t.shape
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint(handle: &ModelHandle, path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = encode_params(&handle.params);
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        config: handle.config.clone(),
        phase: handle.phase,
        parameter_count: handle.params.numel(),
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        content_hash: content_hash(&bytes),
    };
    std::fs::write(path, &bytes)?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelHandle> {
    let path = path.as_ref();
    let load_err = |reason: String| Error::Load {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| load_err(e.to_string()))?;
    let meta_file = meta_path(path);
    let meta_text = std::fs::read_to_string(&meta_file).map_err(|e| Error::Load {
        path: meta_file.clone(),
        reason: e.to_string(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    if meta.content_hash != content_hash(&bytes) {
        return Err(load_err("content hash does not match the sidecar".into()));
    }
    meta.config.validate()?;
    let handle = ModelHandle {
        config: meta.config,
        phase: meta.phase,
        params: decode_params(&bytes)?,
    };
    check_compatible(&handle)?;
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder_widths: vec![4, 8],
            fim_dim: 6,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_bitwise() {
        let m = build_model(&small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("final.ckpt");
        let meta = save_checkpoint(&m, &p).unwrap();
        assert_eq!(meta.parameter_count, m.params.numel());
        assert!(dir.path().join("final.meta.json").is_file());
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn stripped_is_smaller_and_loads() {
        let m = build_model(&small(), 5).unwrap();
        let s = m.strip_for_test();
        assert!(encode_params(&s.params).len() < encode_params(&m.params).len());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("best.ckpt");
        save_checkpoint(&s, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), s);
    }

    #[test]
    fn corrupt_or_mismatched_is_rejected() {
        let m = build_model(&small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());

        let mut other = m.clone();
        other.config.encoder_widths = vec![4, 6];
        assert!(matches!(check_compatible(&other), Err(Error::Config(_))));
        assert!(decode_params(b"nonsense").is_err());
    }
}

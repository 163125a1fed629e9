//! Model checkpoint container. Little-endian layout:
//! magic "MWCK" | version u32 | meta_len u32 | meta JSON (UTF-8) |
//! n_params u32 | for each parameter in name order:
//!   name_len u32 | name | ndim u32 | dims u32... | f32 values.
//! save(load(f)) is byte-identical because parameters iterate in sorted
//! order and meta is a sorted-key map.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"MWCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic at offset 0 (expected MWCK)")]
    BadMagic,
    #[error("unsupported version {0} at offset 4")]
    BadVersion(u32),
    #[error("truncated checkpoint at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed meta JSON: {0}")]
    BadMeta(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: ParamStore<f32>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                offset: self.buf.len(),
                needed: self.pos + n - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save(
    path: &Path,
    params: &ParamStore<f32>,
    meta: &BTreeMap<String, serde_json::Value>,
) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).expect("meta serializes");
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(params.map.len() as u32).to_le_bytes());
    for (name, arr) in &params.map {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        let std = arr.as_standard_layout();
        for v in std.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let write = |p: &Path| -> std::io::Result<()> {
        let mut f = std::fs::File::create(p)?;
        f.write_all(&out)?;
        f.sync_all()
    };
    write(&tmp).map_err(|source| CheckpointError::Io {
        path: tmp.display().to_string(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = c.u32()? as usize;
    let meta: BTreeMap<String, serde_json::Value> = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    let n_params = c.u32()? as usize;
    // Seed is irrelevant after loading; parameters are fully materialized.
    let mut params = ParamStore::new(0);
    for _ in 0..n_params {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
        let ndim = c.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4)?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.insert(&name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
    }
    Ok(Checkpoint { meta, params })
}

/// SHA-256 of a parameter store's serialized bytes; used by freeze checks.
pub fn param_hash(params: &ParamStore<f32>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, arr) in &params.map {
        h.update(name.as_bytes());
        h.update([0u8]);
        let std = arr.as_standard_layout();
        for v in std.iter() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_store() -> ParamStore<f32> {
        let mut p = ParamStore::new(9);
        p.init_uniform("z.w", &[3, 4], 3);
        p.init_normal("a.emb", &[5, 2], 0.02);
        p.init_zeros("m.b", &[4]);
        p
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.mwck");
        let p2 = dir.path().join("b.mwck");
        let store = sample_store();
        let mut meta = BTreeMap::new();
        meta.insert("val_loss".to_string(), serde_json::json!(0.125));
        save(&p1, &store, &meta).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.meta, meta);
        save(&p2, &loaded.params, &loaded.meta).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.mwck");
        std::fs::write(&p, b"XWCK\x01\x00\x00\x00").unwrap();
        match load(&p) {
            Err(CheckpointError::BadMagic) => {}
            Err(other) => panic!("expected BadMagic, got {other:?}"),
            Ok(_) => panic!("expected BadMagic, got a parsed checkpoint"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.mwck");
        let store = sample_store();
        save(&p, &store, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        match load(&p) {
            Err(CheckpointError::Truncated { .. }) => {}
            Err(other) => panic!("expected Truncated, got {other:?}"),
            Ok(_) => panic!("expected Truncated, got a parsed checkpoint"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let store = sample_store();
        let mut other = sample_store();
        assert_eq!(param_hash(&store), param_hash(&other));
        other.get_mut("m.b")[[0]] = 1.0;
        assert_ne!(param_hash(&store), param_hash(&other));
    }
}

//! Binary checkpoint: `b"CCDN"`, little-endian `u32` version, JSON header
//! with the model config, a mode byte, then named `f32` tensors.

use std::fs;
use std::path::Path;

use ccdnet_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::{Entry, ParamStore};

pub const MAGIC: &[u8; 4] = b"CCDN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, meta: CheckpointMeta, store: ParamStore<f32>) -> Self {
        Self {
            config,
            meta,
            store,
        }
    }

    pub fn is_fused(&self) -> bool {
        model::is_fused(&self.config, &self.store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        out.push(self.is_fused() as u8);
        put_u32(&mut out, self.store.len() as u32);
        for (name, e) in self.store.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            out.push(e.trainable as u8);
            put_u32(&mut out, e.value.rank() as u32);
            for &d in e.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let fused_flag = r.take(1)?[0];
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert_entry(
                name,
                Entry {
                    value: Tensor::new(&shape, data),
                    trainable,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let ck = Self {
            config: header.model,
            meta: header.meta,
            store,
        };
        if ck.is_fused() != (fused_flag != 0) {
            return Err(Error::Checkpoint(
                "mode flag does not match stored parameters".into(),
            ));
        }
        Ok(ck)
    }

    /// Writes through a temporary file so a crash never leaves half a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_train_and_fused() {
        let cfg = ModelConfig::default();
        let store = model::init_params::<f32>(&cfg, 5).unwrap();
        let meta = CheckpointMeta {
            epoch: 3,
            step: 40,
            seed: 5,
        };
        let ck = Checkpoint::new(cfg.clone(), meta, store.clone());
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

        let fused = Checkpoint::new(
            cfg.clone(),
            CheckpointMeta::default(),
            model::fuse_model(&cfg, &store).unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.ccdn");
        fused.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert!(back.is_fused());
        assert_eq!(back, fused);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::default();
        let ck = Checkpoint::new(
            cfg.clone(),
            CheckpointMeta::default(),
            model::init_params(&cfg, 0).unwrap(),
        );
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(Checkpoint::from_bytes(&v2)
            .unwrap_err()
            .to_string()
            .contains("version 2"));
    }
}

//! Binary checkpoint archive.
//!
//! Layout (little-endian): 8 magic bytes, `u32` format version, `u32` length
//! plus JSON metadata, `u32` record count, then per parameter: `u32` name
//! length, UTF-8 name, `u32` rank, `u32` dims, row-major `f32` payload.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Normalizer;
use crate::error::{Error, Result};
use crate::nn::model::{Model, ModelSpec, Network};
use crate::nn::params::ParamStore;
use crate::nn::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"FCASTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub normalizer: Option<Normalizer>,
    /// Hex SHA-256 of the canonical training config.
    pub config_digest: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<ParamRecord>,
}

pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
                values: p.value.data.clone(),
            })
            .collect();
        Self { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let n = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(n)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let bytes = r.take(numel(&shape) * 4)?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(ParamRecord { name, shape, values });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model; every parameter must be present exactly once.
    pub fn to_model(&self) -> Result<Model> {
        let mut params = ParamStore::<f32>::new();
        let net = Network::build(&self.meta.spec, &mut params, 0)?;
        let mut seen = BTreeSet::new();
        for rec in &self.params {
            let id = params
                .find(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", rec.name)))?;
            if !seen.insert(id) {
                return Err(Error::Checkpoint(format!("parameter `{}` appears twice", rec.name)));
            }
            let slot = params.value_mut(id);
            if slot.shape != rec.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    rec.name, rec.shape, slot.shape
                )));
            }
            *slot = Tensor {
                shape: rec.shape.clone(),
                data: rec.values.clone(),
            };
        }
        if seen.len() != params.len() {
            let missing: Vec<_> = params
                .iter()
                .filter(|(id, _)| !seen.contains(id))
                .map(|(_, p)| p.name.clone())
                .collect();
            return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        Ok(Model { net, params })
    }

    /// Hex SHA-256 of the serialized archive.
    pub fn digest(&self) -> Result<String> {
        Ok(digest_hex(&self.to_bytes()?))
    }
}

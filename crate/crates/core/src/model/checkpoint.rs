//! Checkpoint files.
//!
//! Layout (little-endian): `b"NRIM"`, `u32` version, `u32` length of a JSON
//! blob, the blob, `u32` tensor count, then per tensor a `u32`-length-prefixed
//! UTF-8 name, `u32` rank, `rank` × `u32` dims and the `f32` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{param_shapes, ModelConfig, ModelParams};
use crate::dynamics::io::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NRIM";
pub const VERSION: u32 = 1;

/// Named tensors plus a JSON blob. The blob always carries the model
/// configuration under `"model"`; other keys belong to the writer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams<f32>, extra: Value) -> Self {
        let mut meta = match extra {
            Value::Object(m) => Value::Object(m),
            Value::Null => json!({}),
            other => json!({ "extra": other }),
        };
        meta["model"] = serde_json::to_value(&params.config).expect("config serializes");
        Self {
            meta,
            tensors: params.tensors.clone(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let v = self
            .meta
            .get("model")
            .ok_or_else(|| Error::Missing("checkpoint has no model configuration".into()))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// The model parameters; tensors under other names are ignored.
    pub fn params(&self) -> Result<ModelParams<f32>> {
        let config = self.model_config()?;
        let mut tensors = BTreeMap::new();
        for (name, _) in param_shapes(&config) {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Missing(format!("checkpoint lacks parameter {name}")))?;
            tensors.insert(name, t.clone());
        }
        let p = ModelParams { config, tensors };
        p.validate()?;
        Ok(p)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported version {version}")));
        }
        let len = r.u32("metadata length")? as usize;
        let at = r.offset();
        let meta: Value = serde_json::from_slice(r.take(len, "metadata")?)
            .map_err(|e| Error::format(at, format!("metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|e| Error::format(at, format!("tensor name: {e}")))?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let at = r.offset();
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, format!("tensor {name} too large")))?;
            let data = r.f32s(count, &format!("tensor {name}"))?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(at, format!("duplicate tensor {name}")));
            }
        }
        r.finish()?;
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(format!("checkpoint {} not found", path.display()))
            } else {
                e.into()
            }
        })?;
        Self::decode(&bytes)
    }
}

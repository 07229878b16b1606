use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::Params;
use super::transformer::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prompt::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SENTIOCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Arrays under this prefix carry optimizer state rather than model weights.
pub const OPTIMIZER_PREFIX: &str = "opt.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    dataset_ids: Vec<String>,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Versioned container: magic, `u32` version, `u64` header length, a JSON
/// header (config, vocabulary, metadata, array directory), then each array's
/// little-endian values in directory order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub dataset_ids: Vec<String>,
    /// Free-form run state (stage, step, sampler and seed).
    pub meta: serde_json::Value,
    /// Model weights plus `opt.`-prefixed optimizer state.
    pub arrays: BTreeMap<String, Tensor>,
    pub dtype: Dtype,
}

impl Checkpoint {
    pub fn from_model(model: &Model, vocab: &Vocab, meta: serde_json::Value) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab: vocab.tokens().to_vec(),
            dataset_ids: vocab.datasets().to_vec(),
            meta,
            arrays: model.params.clone(),
            dtype: Dtype::F64,
        }
    }

    /// Rebuilds the model, failing on any missing, extra or misshapen weight.
    pub fn model(&self) -> Result<Model> {
        let params: Params = self
            .arrays
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIMIZER_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Model::from_params(self.config.clone(), params)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let v = Vocab::from_tokens(self.vocab.clone())?;
        if v.datasets() != self.dataset_ids.as_slice() {
            return Err(Error::Checkpoint("dataset ids disagree with the vocabulary".into()));
        }
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            dataset_ids: self.dataset_ids.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry { name: name.clone(), dtype: self.dtype, shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.arrays.values() {
            for &v in t.data() {
                match self.dtype {
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut arrays = BTreeMap::new();
        let mut dtype = None;
        for entry in header.arrays {
            if *dtype.get_or_insert(entry.dtype) != entry.dtype {
                return Err(bad("mixed array dtypes".into()));
            }
            let n: usize = entry.shape.iter().product();
            let w = entry.dtype.width();
            let raw = bytes
                .get(pos..pos + n * w)
                .ok_or_else(|| bad(format!("truncated data for {}", entry.name)))?;
            pos += n * w;
            let data = match entry.dtype {
                Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            let t = Tensor::new(entry.shape, data).map_err(|e| bad(format!("{}: {e}", entry.name)))?;
            if arrays.insert(entry.name.clone(), t).is_some() {
                return Err(bad(format!("duplicate array {}", entry.name)));
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after array data".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab: header.vocab,
            dataset_ids: header.dataset_ids,
            meta: header.meta,
            arrays,
            dtype: dtype.unwrap_or(Dtype::F64),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

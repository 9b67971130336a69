// SPDX-License-Identifier: Apache-2.0

//! Binary checkpoint: magic, JSON header length, JSON header, then every
//! tensor as little-endian f64 in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;

use super::optim::AdamState;
use super::TrainConfig;

const MAGIC: &[u8; 8] = b"VBSECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: usize,
    init_scheme: String,
    adam_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Model state plus everything needed to resume or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub params: ParameterSet,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Freshly initialized weights.
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model: model.clone(),
            train: None,
            step: 0,
            params: ParameterSet::init(model, seed)?,
            optimizer: None,
        })
    }

    /// Diagnostic model whose masks are all one: output equals input.
    pub fn identity(model: &ModelConfig) -> Result<Self> {
        let mut ck = Self::init(model, 0)?;
        ck.params.set_identity_masks(model);
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&[f64]> = Vec::new();
        for (name, t) in self.params.params() {
            tensors.push(TensorEntry {
                name: name.clone(),
                slot: Slot::Param,
                shape: t.shape().to_vec(),
            });
            payload.push(t.data());
        }
        for (name, t) in self.params.buffers() {
            tensors.push(TensorEntry {
                name: name.clone(),
                slot: Slot::Buffer,
                shape: t.shape().to_vec(),
            });
            payload.push(t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (slot, map) in [(Slot::AdamM, &opt.m), (Slot::AdamV, &opt.v)] {
                for (name, v) in map {
                    tensors.push(TensorEntry {
                        name: name.clone(),
                        slot,
                        shape: vec![v.len()],
                    });
                    payload.push(v);
                }
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            init_scheme: self.params.init_scheme.clone(),
            adam_t: self.optimizer.as_ref().map(|o| o.t),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = payload.iter().map(|p| p.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in payload {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Version("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Version("truncated checkpoint header".into()))?;
        let version = serde_json::from_slice::<serde_json::Value>(body)?
            .get("version")
            .and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version(format!(
                "checkpoint version {version:?}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let header: Header = serde_json::from_slice(body)?;
        let mut data = bytes[16 + hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let values: Vec<f64> = data.by_ref().take(n).collect();
            if values.len() != n {
                return Err(Error::Version(format!(
                    "checkpoint payload ends inside {}",
                    e.name
                )));
            }
            match e.slot {
                Slot::Param => drop(params.insert(e.name, Tensor::new(e.shape, values))),
                Slot::Buffer => drop(buffers.insert(e.name, Tensor::new(e.shape, values))),
                Slot::AdamM => drop(m.insert(e.name, values)),
                Slot::AdamV => drop(v.insert(e.name, values)),
            }
        }
        if data.next().is_some() {
            return Err(Error::Version(
                "trailing bytes after checkpoint payload".into(),
            ));
        }
        let params = ParameterSet::from_parts(header.init_scheme, params, buffers);
        params.check_against(&header.model).map_err(|e| {
            Error::Version(format!(
                "checkpoint does not match its own model config: {e}"
            ))
        })?;
        Ok(Self {
            model: header.model,
            train: header.train,
            step: header.step,
            params,
            optimizer: header.adam_t.map(|t| AdamState { t, m, v }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails with a version error when `expected` differs from the stored config.
    pub fn ensure_model(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            return Err(Error::Version(format!(
                "checkpoint was trained with a different model configuration ({} vs {} parameters)",
                crate::model::param_count(&self.model),
                crate::model::param_count(expected)
            )));
        }
        Ok(())
    }
}

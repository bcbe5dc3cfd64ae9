//! Checkpoint container.
//!
//! ```text
//! "LQSG" | u16 LE version | u32 LE header length | JSON header | payload
//! ```
//!
//! The header holds the run config, the iteration count and a directory
//! `name -> {shape, offset, length}` whose extents index the payload of
//! little-endian `f32` values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LQSG";
pub const CHECKPOINT_VERSION: u16 = 1;
const PREAMBLE: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint at byte {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },
    #[error("schema mismatch on {field}: expected {expected}, found {found}")]
    Schema {
        field: String,
        expected: String,
        found: String,
    },
}

fn corrupt(offset: usize, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn schema(field: impl Into<String>, expected: impl ToString, found: impl ToString) -> CheckpointError {
    CheckpointError::Schema {
        field: field.into(),
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    iteration: usize,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Named tensors plus the run they belong to. Values are held at `f32`
/// precision so that a save/load round trip is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed optimisation steps.
    pub iteration: usize,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, iteration: usize, tensors: Vec<(String, Tensor)>) -> Self {
        let tensors = tensors
            .into_iter()
            .map(|(n, mut t)| {
                round_f32(&mut t);
                (n, t)
            })
            .collect();
        Checkpoint {
            config,
            iteration,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut directory = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            directory.insert(
                name.clone(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    offset,
                    length: payload.len() as u64 - offset,
                },
            );
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            iteration: self.iteration,
            tensors: directory,
        })
        .expect("header serialises");
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and validates a checkpoint; errors carry the byte offset of
    /// the first inconsistency.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < PREAMBLE {
            return Err(corrupt(bytes.len(), format!("file is {} bytes, shorter than the preamble", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(4, format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let payload_start = PREAMBLE + header_len;
        if payload_start > bytes.len() {
            return Err(corrupt(6, format!("header length {header_len} runs past the end of the file")));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| corrupt(PREAMBLE, format!("header: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut entries: Vec<(&String, &TensorEntry)> = header.tensors.iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut cursor = 0u64;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, e) in entries {
            let at = payload_start + e.offset as usize;
            if e.offset < cursor {
                return Err(corrupt(at, format!("tensor {name} overlaps the previous tensor")));
            }
            if e.offset > cursor {
                return Err(corrupt(payload_start + cursor as usize, format!("gap before tensor {name}")));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != 4 * numel as u64 {
                return Err(corrupt(
                    at,
                    format!("tensor {name} has length {} but shape {:?}", e.length, e.shape),
                ));
            }
            let end = e.offset + e.length;
            if end > payload.len() as u64 {
                return Err(corrupt(
                    payload_start + payload.len(),
                    format!("tensor {name} extends to payload byte {end}, payload has {}", payload.len()),
                ));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| corrupt(at, err.to_string()))?;
            tensors.push((name.clone(), t));
            cursor = end;
        }
        if cursor != payload.len() as u64 {
            return Err(corrupt(
                payload_start + cursor as usize,
                format!("{} trailing payload bytes", payload.len() as u64 - cursor),
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            iteration: header.iteration,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rebuilds the model described by the config and fills in the stored
    /// parameters, checking every name and shape.
    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        let cfg = self.config.model;
        let mut model = Model::new(cfg, self.config.train.seed).map_err(|e| schema("model", "a valid model config", e))?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let stored = self.get(&name).ok_or_else(|| schema(name.clone(), "a stored tensor", "nothing"))?;
            let expected = model.params.get(id).shape().to_vec();
            if stored.shape() != expected.as_slice() {
                return Err(schema(
                    mismatch_field(&name, &expected, stored.shape(), cfg.d),
                    format!("{expected:?}"),
                    format!("{:?}", stored.shape()),
                ));
            }
            *model.params.get_mut(id) = stored.clone();
        }
        Ok(model)
    }
}

/// Names the config field a shape disagreement points at.
fn mismatch_field(name: &str, expected: &[usize], found: &[usize], d: usize) -> String {
    if name.ends_with("cls_head.weight") || name.ends_with("cls_head.bias") {
        if expected.last() != found.last() {
            return "K_cls".into();
        }
    }
    if name.ends_with("attr_head.weight") || name.ends_with("attr_head.bias") {
        if expected.last() != found.last() {
            return "K_attr".into();
        }
    }
    if expected.contains(&d) && expected.len() == found.len() {
        return "d".into();
    }
    name.to_string()
}

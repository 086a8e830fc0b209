//! Binary checkpoint format.
//!
//! ```text
//! b"ECKP1"  u32 version  u32 len + config JSON  u32 count
//! per tensor (sorted by name): u16 len + name, u8 rank, u32 dims…, f32 data…
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{EChatModel, ModelConfig};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ECKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stage: u8,
}

pub fn save_checkpoint(model: &EChatModel) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: model.config,
        stage: model.trained_stage,
    };
    let tensors: BTreeMap<&str, &Tensor> = model
        .store
        .iter()
        .map(|(_, name, p)| (name, &p.value))
        .collect();
    encode(&meta, &tensors)
}

fn encode(meta: &CheckpointMeta, tensors: &BTreeMap<&str, &Tensor>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated(self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Raw decoded contents, before they are matched against a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContents {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<CheckpointContents, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) {
            CheckpointError::Truncated(bytes.len())
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 5 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config blob: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        if let Some((prev, _)) = tensors.last() {
            if *prev >= name {
                return Err(CheckpointError::Order(name));
            }
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let body = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(r.pos))?)?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|_| CheckpointError::Malformed(format!("tensor {name} has an empty shape")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointContents { meta, tensors })
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<EChatModel> {
    let contents = decode_checkpoint(bytes)?;
    let mut model = EChatModel::new(contents.meta.model, 0)?;
    model.trained_stage = contents.meta.stage;
    let mut found = vec![false; model.store.len()];
    for (name, t) in contents.tensors {
        let Some(id) = model.store.id(&name) else {
            return Err(CheckpointError::UnexpectedTensor(name).into());
        };
        let p = model.store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        p.value = t;
        found[id.index()] = true;
    }
    if let Some(missing) = model.store.ids().find(|id| !found[id.index()]) {
        return Err(CheckpointError::MissingTensor(model.store.name(missing).to_string()).into());
    }
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &EChatModel) -> Result<()> {
    let bytes = save_checkpoint(model)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<EChatModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}

//! Versioned binary checkpoint container.
//!
//! Layout: magic `FLNSCKPT`, `u32` format version, `u64` header length, JSON
//! header, raw little-endian `f32` payload (parameters, then first moments,
//! then second moments, each in parameter order), and a trailing SHA-256 of
//! everything before it. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::MetricsHistory;
use crate::nn::ParamKind;
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"FLNSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateHeader {
    pub epoch: usize,
    pub global_step: u64,
    pub optimizer_steps: Vec<u64>,
    pub freeze_mask: Vec<bool>,
    pub history: MetricsHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: String,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    state: StateHeader,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub params: Vec<Vec<f32>>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub state: StateHeader,
}

fn push_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let params = t.store.params();
    let header = Header {
        model: t.config.model.name(),
        config: t.config.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                kind: p.kind,
                group: p.group,
            })
            .collect(),
        state: StateHeader {
            epoch: t.state.epoch,
            global_step: t.state.global_step,
            optimizer_steps: t.state.optim.steps.clone(),
            freeze_mask: t.state.freeze_mask.clone(),
            history: t.state.history.clone(),
        },
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        push_f32s(&mut out, p.value.data());
    }
    for m in &t.state.optim.m {
        push_f32s(&mut out, m.data());
    }
    for v in &t.state.optim.v {
        push_f32s(&mut out, v.data());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Integrity(format!("checkpoint: {m}"));
    if bytes.len() < MAGIC.len() + 12 + 32 {
        return Err(bad("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("SHA-256 mismatch (file is corrupted or truncated)".into()));
    }
    if &body[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &body[20..];
    if rest.len() < len {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| bad(e.to_string()))?;
    let mut payload = rest[len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    if rest[len..].len() != total * 3 * 4 {
        return Err(bad(format!("payload holds {} bytes, header describes {}", rest[len..].len(), total * 12)));
    }
    let mut take = || sizes.iter().map(|&n| payload.by_ref().take(n).collect::<Vec<f32>>()).collect::<Vec<_>>();
    let (params, m, v) = (take(), take(), take());
    header.config.validate().map_err(|e| bad(format!("embedded config invalid: {e}")))?;
    Ok(Checkpoint {
        config: header.config,
        tensors: header.tensors,
        params,
        m,
        v,
        state: header.state,
    })
}

impl Checkpoint {
    /// Copies parameters and state into a trainer built from the same config.
    pub fn restore(self, t: &mut Trainer) -> Result<()> {
        let store_params = t.store.params();
        if store_params.len() != self.tensors.len()
            || store_params.iter().zip(&self.tensors).any(|(p, e)| p.name != e.name || p.value.shape() != e.shape.as_slice())
        {
            return Err(Error::Integrity("checkpoint tensors do not match the model built from its config".into()));
        }
        let ids: Vec<_> = t.store.ids().collect();
        for ((id, data), e) in ids.iter().zip(self.params).zip(&self.tensors) {
            t.store.set(*id, Tensor::new(&e.shape, data)?)?;
        }
        t.state.optim.m = self.m.into_iter().zip(&self.tensors).map(|(d, e)| Tensor::new(&e.shape, d)).collect::<Result<_>>()?;
        t.state.optim.v = self.v.into_iter().zip(&self.tensors).map(|(d, e)| Tensor::new(&e.shape, d)).collect::<Result<_>>()?;
        if self.state.optimizer_steps.len() != self.tensors.len() {
            return Err(Error::Integrity("optimizer step counts do not match tensor count".into()));
        }
        t.state.optim.steps = self.state.optimizer_steps;
        t.state.epoch = self.state.epoch;
        t.state.global_step = self.state.global_step;
        t.state.freeze_mask = self.state.freeze_mask;
        t.state.history = self.state.history;
        Ok(())
    }
}

pub fn write(t: &Trainer, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Short content id of a checkpoint file (first 16 hex digits of its SHA-256).
pub fn file_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

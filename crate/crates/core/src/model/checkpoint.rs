//! Checkpoint container.
//!
//! Layout: 8-byte magic, u64 header length, JSON header (config, named
//! parameter shapes, optional training state), a little-endian f64 blob
//! area, and a trailing SHA-256 of everything before it. Model files and
//! training checkpoints share the format; the latter carry Adam moments
//! and loop counters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::atomic_write;
use crate::model::{ModelConfig, MultiHeadModel};
use crate::numerics::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MTPASR1\n";

/// Optimizer and loop state carried by training checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub next_step: u64,
    pub next_epoch: u64,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
    train: Option<TrainHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TrainHeader {
    next_step: u64,
    next_epoch: u64,
    adam_t: u64,
}

fn push_f64s(blob: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(blob: &[u8], offset: &mut usize, count: usize, path: &Path) -> Result<Vec<f64>> {
    let bytes = count * 8;
    if *offset + bytes > blob.len() {
        return Err(Error::Checkpoint(format!(
            "{} is truncated: blob ends inside a tensor",
            path.display()
        )));
    }
    let out = blob[*offset..*offset + bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    *offset += bytes;
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &MultiHeadModel,
    train: Option<&TrainState>,
) -> Result<()> {
    let header = Header {
        version: 1,
        config: model.config.clone(),
        params: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.shape().to_vec(),
            })
            .collect(),
        train: train.map(|t| TrainHeader {
            next_step: t.next_step,
            next_epoch: t.next_epoch,
            adam_t: t.adam_t,
        }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encoding failed: {e}")))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in model.params() {
        push_f64s(&mut bytes, p.data());
    }
    if let Some(t) = train {
        for m in &t.adam_m {
            push_f64s(&mut bytes, m);
        }
        for v in &t.adam_v {
            push_f64s(&mut bytes, v);
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(MultiHeadModel, Option<TrainState>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Checkpoint(format!(
            "{} is truncated: {} bytes is too short for a checkpoint",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(format!(
            "{} failed its checksum; the file is corrupt",
            path.display()
        )));
    }

    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::Checkpoint(format!(
            "{} is truncated inside the header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            header.version
        )));
    }
    header.config.validate()?;

    let blob = &body[16 + header_len..];
    let mut offset = 0usize;
    let mut names = Vec::with_capacity(header.params.len());
    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let data = read_f64s(blob, &mut offset, numel, path)?;
        names.push(entry.name.clone());
        params.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let model = MultiHeadModel::from_parts(header.config, names, params);
    // The stored tensors must be exactly the ones this config produces.
    let fresh = super::init_model(&model.config)?;
    if fresh.param_names() != model.param_names() {
        return Err(Error::Checkpoint(format!(
            "{}: parameters do not match the stored config",
            path.display()
        )));
    }
    for (a, b) in fresh.params().iter().zip(model.params()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter shapes do not match the stored config",
                path.display()
            )));
        }
    }

    let train = match header.train {
        None => None,
        Some(t) => {
            let mut adam_m = Vec::with_capacity(model.params().len());
            for p in model.params() {
                adam_m.push(read_f64s(blob, &mut offset, p.numel(), path)?);
            }
            let mut adam_v = Vec::with_capacity(model.params().len());
            for p in model.params() {
                adam_v.push(read_f64s(blob, &mut offset, p.numel(), path)?);
            }
            Some(TrainState {
                next_step: t.next_step,
                next_epoch: t.next_epoch,
                adam_t: t.adam_t,
                adam_m,
                adam_v,
            })
        }
    };
    if offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} unexpected trailing bytes in the blob area",
            path.display(),
            blob.len() - offset
        )));
    }
    Ok((model, train))
}

/// Saves model parameters only.
pub fn save_model(path: &Path, model: &MultiHeadModel) -> Result<()> {
    save_checkpoint(path, model, None)
}

/// Loads a model, ignoring any training state in the file.
pub fn load_model(path: &Path) -> Result<MultiHeadModel> {
    Ok(load_checkpoint(path)?.0)
}

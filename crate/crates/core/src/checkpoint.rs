//! Binary checkpoint file.
//!
//! Layout: 8-byte magic `LOBDIF\0` plus a version byte, a little-endian
//! `u64` metadata length, the UTF-8 JSON metadata, then every tensor as raw
//! little-endian `f64` in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NormStats;
use crate::numcore::{ParamStore, RngState, Tensor};
use crate::trainer::{Checkpoint, EpochLog, ResumeState, TrainConfig};

pub const MAGIC: [u8; 7] = *b"LOBDIF\0";
pub const VERSION: u8 = 1;

const GROUPS: [&str; 4] = ["params", "resume", "adam_m", "adam_v"];

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    norm: NormStats,
    epoch: usize,
    best_epoch: usize,
    best_valid_loss: f64,
    history: Vec<EpochLog>,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn groups(ck: &Checkpoint) -> [(&'static str, Vec<(&str, &Tensor)>); 4] {
    // The optimizer moments are parallel to the parameter list.
    let names = ck.params.names().iter().map(String::as_str);
    [
        (GROUPS[0], ck.params.iter().collect()),
        (GROUPS[1], ck.resume.params.iter().collect()),
        (GROUPS[2], names.clone().zip(ck.resume.adam_m.iter()).collect()),
        (GROUPS[3], names.zip(ck.resume.adam_v.iter()).collect()),
    ]
}

/// Serializes `ck` into the checkpoint byte format.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (group, items) in groups(ck) {
        for (name, t) in items {
            tensors.push(TensorEntry {
                name: format!("{group}/{name}"),
                shape: t.shape().to_vec(),
                offset: data.len() as u64,
            });
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let meta = Metadata {
        config: ck.config,
        norm: ck.norm,
        epoch: ck.epoch,
        best_epoch: ck.best_epoch,
        best_valid_loss: ck.best_valid_loss,
        history: ck.history.clone(),
        adam_step: ck.resume.adam_step,
        rng: ck.resume.shuffle_rng,
        tensors,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn truncated() -> Error {
    Error::Checkpoint("file is truncated".into())
}

/// Parses the checkpoint byte format.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(truncated());
    }
    if bytes[..7] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    if bytes[7] != VERSION {
        return Err(Error::CheckpointVersion {
            found: bytes[7],
            expected: VERSION,
        });
    }
    let len_bytes: [u8; 8] = bytes.get(8..16).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| truncated())?;
    let json = bytes.get(16..16usize.checked_add(len).ok_or_else(truncated)?).ok_or_else(truncated)?;
    let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let data = &bytes[16 + len..];

    let mut stores: [ParamStore; 4] = Default::default();
    let mut expected_end = 0u64;
    for entry in &meta.tensors {
        let (group, name) = entry
            .name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("bad tensor name '{}'", entry.name)))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group '{group}'")))?;
        if entry.offset != expected_end {
            return Err(Error::Checkpoint(format!("tensor '{}' is out of order", entry.name)));
        }
        let n: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| truncated())?;
        let end = start.checked_add(n * 8).ok_or_else(truncated)?;
        let raw = data.get(start..end).ok_or_else(truncated)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), values)?;
        stores[gi].insert(name, t);
        expected_end = end as u64;
    }
    if data.len() as u64 != expected_end {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            data.len() as u64 - expected_end
        )));
    }
    let [params, resume, adam_m, adam_v] = stores;
    Ok(Checkpoint {
        config: meta.config,
        norm: meta.norm,
        params,
        epoch: meta.epoch,
        best_epoch: meta.best_epoch,
        best_valid_loss: meta.best_valid_loss,
        history: meta.history,
        resume: ResumeState {
            params: resume,
            adam_step: meta.adam_step,
            adam_m: adam_m.tensors().to_vec(),
            adam_v: adam_v.tensors().to_vec(),
            shuffle_rng: meta.rng,
        },
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

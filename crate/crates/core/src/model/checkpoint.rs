//! Checkpoint layout: a directory holding `ckpt.json` (manifest) and
//! `ckpt.bin` (little-endian float32 arrays concatenated in manifest order).
//! The manifest lists every tensor's name, shape, element offset and length,
//! the training-step counter, free-form metadata, and optionally the Adam
//! moment arrays (also stored in `ckpt.bin`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{LneError, Result};
use crate::rawio::{read_f32s, write_f32s};
use crate::training::OptimizerState;

use super::ModelParams;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "ckpt.json";
pub const PAYLOAD_NAME: &str = "ckpt.bin";
const FORMAT: &str = "lne-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    byte_order: String,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    first_moment: Vec<Entry>,
    second_moment: Vec<Entry>,
}

/// Everything stored in a checkpoint directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub meta: serde_json::Value,
}

fn append(payload: &mut Vec<f32>, entries: &mut Vec<Entry>, name: &str, shape: &[usize], data: &[f32]) {
    entries.push(Entry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset: payload.len(),
        len: data.len(),
    });
    payload.extend_from_slice(data);
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LneError::io(dir, e))?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.params.iter() {
        append(&mut payload, &mut tensors, name, t.shape(), t.data());
    }
    let optimizer = ckpt.optimizer.as_ref().map(|opt| {
        let mut first_moment = Vec::new();
        let mut second_moment = Vec::new();
        for (name, m) in &opt.first_moment {
            append(&mut payload, &mut first_moment, name, &[m.len()], m);
        }
        for (name, v) in &opt.second_moment {
            append(&mut payload, &mut second_moment, name, &[v.len()], v);
        }
        OptimizerEntry {
            step: opt.step,
            first_moment,
            second_moment,
        }
    });
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: "float32".into(),
        byte_order: "little".into(),
        step: ckpt.step,
        meta: ckpt.meta.clone(),
        tensors,
        optimizer,
    };
    write_f32s(&dir.join(PAYLOAD_NAME), &payload)?;
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| LneError::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_NAME);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(LneError::MissingFile(path)),
        Err(e) => return Err(LneError::io(&path, e)),
    };
    let malformed = |reason: String| LneError::Manifest {
        path: path.clone(),
        reason,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if m.format != FORMAT {
        return Err(malformed(format!("unknown format {:?}", m.format)));
    }
    if m.version != CHECKPOINT_VERSION {
        return Err(LneError::Version {
            found: m.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if m.dtype != "float32" || m.byte_order != "little" {
        return Err(malformed(format!("unsupported encoding {}/{}", m.dtype, m.byte_order)));
    }
    let all_entries = m
        .tensors
        .iter()
        .chain(m.optimizer.iter().flat_map(|o| o.first_moment.iter().chain(&o.second_moment)));
    let total = all_entries.map(|e| e.offset + e.len).max().unwrap_or(0);
    let bin = dir.join(PAYLOAD_NAME);
    let payload = read_f32s(&bin, total)?;
    let slice = |e: &Entry| -> Result<Vec<f32>> {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(malformed(format!("tensor {:?}: shape {:?} vs length {}", e.name, e.shape, e.len)));
        }
        Ok(payload[e.offset..e.offset + e.len].to_vec())
    };
    let mut params = ModelParams::new();
    for e in &m.tensors {
        if params.contains(&e.name) {
            return Err(malformed(format!("duplicate tensor {:?}", e.name)));
        }
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), slice(e)?)?);
    }
    let optimizer = match &m.optimizer {
        None => None,
        Some(o) => {
            let collect = |entries: &[Entry]| -> Result<BTreeMap<String, Vec<f32>>> {
                entries.iter().map(|e| Ok((e.name.clone(), slice(e)?))).collect()
            };
            Some(OptimizerState {
                step: o.step,
                first_moment: collect(&o.first_moment)?,
                second_moment: collect(&o.second_moment)?,
            })
        }
    };
    Ok(Checkpoint {
        params,
        optimizer,
        step: m.step,
        meta: m.meta,
    })
}

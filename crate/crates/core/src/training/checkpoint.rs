//! Self-describing binary checkpoint container.
//!
//! Layout: magic `NGPT`, format version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header, then raw little-endian IEEE-754 float32 tensor data in
//! directory order. Tensors store as f32 (compute stays f64); configs and
//! counters round-trip exactly.

use super::{TrainError, TrainState};
use crate::model::{init_params, ModelConfig};
use crate::numerics::{Rng, Tensor};
use crate::optimizer::{AdamState, OptimConfig};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NGPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    optim: OptimConfig,
    step: u64,
    adam_step: u64,
    /// xoshiro256++ state words as decimal strings (JSON-safe u64).
    rng: [String; 4],
    tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), source }
}

/// All tensors a checkpoint carries, in directory order: parameters, then
/// Adam first/second moments for every trainable parameter.
fn collect_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    let mut trainable: Vec<(String, Vec<usize>)> = Vec::new();
    state.params.visit(&mut |name, meta, t| {
        out.push((name.to_string(), t.clone()));
        if meta.trainable {
            trainable.push((name.to_string(), t.shape().to_vec()));
        }
    });
    for (name, shape) in &trainable {
        let m = state
            .adam
            .m
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape));
        out.push((format!("adam.m.{name}"), m));
    }
    for (name, shape) in &trainable {
        let v = state
            .adam
            .v
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape));
        out.push((format!("adam.v.{name}"), v));
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    model_cfg: &ModelConfig,
    optim_cfg: &OptimConfig,
) -> Result<(), TrainError> {
    let tensors = collect_tensors(state);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.len() * 4) as u64;
    }
    let rng_state = state.rng.state();
    let header = Header {
        model: model_cfg.clone(),
        optim: optim_cfg.clone(),
        step: state.step as u64,
        adam_step: state.adam.step,
        rng: rng_state.map(|w| w.to_string()),
        tensors: entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| TrainError::InvalidHeader(e.to_string()))?;

    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(&header_json).map_err(|e| io_err(path, e))?;
    let mut payload = Vec::with_capacity(offset as usize);
    for (_, t) in &tensors {
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, ModelConfig, OptimConfig), TrainError> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch { found: version });
    }
    let mut long = [0u8; 8];
    file.read_exact(&mut long).map_err(|e| io_err(path, e))?;
    let header_len = u64::from_le_bytes(long);
    let mut header_bytes = vec![0u8; header_len as usize];
    file.read_exact(&mut header_bytes)
        .map_err(|_| TrainError::TruncatedPayload { expected: header_len, actual: 0 })?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| TrainError::InvalidHeader(e.to_string()))?;

    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    let expected: u64 = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() as u64 * 4)
        .sum();
    if (payload.len() as u64) < expected {
        return Err(TrainError::TruncatedPayload {
            expected,
            actual: payload.len() as u64,
        });
    }

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor, TrainError> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > payload.len() {
            return Err(TrainError::TruncatedPayload {
                expected: end as u64,
                actual: payload.len() as u64,
            });
        }
        let mut data = Vec::with_capacity(n);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(Tensor::from_vec(&entry.shape, data))
    };

    // Rebuild the parameter structure from the config, then overwrite every
    // tensor from the directory.
    let mut params = init_params(&header.model, 0).map_err(TrainError::Model)?;
    let find = |name: &str| header.tensors.iter().find(|e| e.name == name);
    let mut missing: Option<String> = None;
    let mut shape_err: Option<String> = None;
    let mut loaded: Vec<(String, Tensor)> = Vec::new();
    params.visit(&mut |name, _, t| {
        if missing.is_some() || shape_err.is_some() {
            return;
        }
        match find(name) {
            None => missing = Some(name.to_string()),
            Some(entry) => {
                if entry.shape != t.shape() {
                    shape_err = Some(format!(
                        "tensor '{name}' has shape {:?}, expected {:?}",
                        entry.shape,
                        t.shape()
                    ));
                } else {
                    match read_tensor(entry) {
                        Ok(t) => loaded.push((name.to_string(), t)),
                        Err(_) => {
                            shape_err = Some(format!("tensor '{name}' payload out of range"))
                        }
                    }
                }
            }
        }
    });
    if let Some(name) = missing {
        return Err(TrainError::MissingTensor { name });
    }
    if let Some(msg) = shape_err {
        return Err(TrainError::InvalidHeader(msg));
    }
    for (name, t) in loaded {
        params.set_tensor(&name, &t);
    }

    let mut adam = AdamState::new();
    adam.step = header.adam_step;
    for entry in &header.tensors {
        if let Some(name) = entry.name.strip_prefix("adam.m.") {
            adam.m.insert(name.to_string(), read_tensor(entry)?);
        } else if let Some(name) = entry.name.strip_prefix("adam.v.") {
            adam.v.insert(name.to_string(), read_tensor(entry)?);
        }
    }

    let mut rng_words = [0u64; 4];
    for (slot, s) in rng_words.iter_mut().zip(&header.rng) {
        *slot = s
            .parse::<u64>()
            .map_err(|_| TrainError::InvalidHeader(format!("bad rng word '{s}'")))?;
    }

    let state = TrainState {
        params,
        adam,
        rng: Rng::from_state(rng_words),
        step: header.step as usize,
    };
    Ok((state, header.model, header.optim))
}

//! Binary weight containers.
//!
//! Layout, all integers little-endian unless noted:
//!
//! ```text
//! magic      8 bytes  "CFCKPT\0\0"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of JSON (config, taxonomy, epoch, tensor index)
//! blobs      f32 values of every tensor, in index order: model parameters
//!            first, then any auxiliary tensors (optimizer moments)
//! checksum   u64 big-endian: first 8 bytes of SHA-256 over everything above
//! ```
//!
//! Pretrained backbone artifacts use the same container with only the tensor
//! index in the meta block.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, ModelConfig, NetworkState};
use crate::dataset::LabelTaxonomy;
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

const MAGIC: &[u8; 8] = b"CFCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taxonomy: Option<LabelTaxonomy>,
    #[serde(default)]
    epoch: usize,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A tensor stored alongside the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Bookkeeping stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointInfo {
    /// Number of completed epochs when the state was saved.
    pub epoch: usize,
    /// Free-form trainer state (best loss, patience counter, ...).
    pub extra: serde_json::Value,
    /// Non-parameter tensors, e.g. optimizer moments.
    pub auxiliary: Vec<NamedTensor>,
}

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("digest has 32 bytes")
}

fn encode(meta: &Meta, blobs: &[&[f32]]) -> Result<Vec<u8>> {
    let meta_bytes = serde_json::to_vec(meta)?;
    let floats: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(28 + meta_bytes.len() + floats * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for blob in blobs {
        for v in *blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(Meta, Vec<Vec<f32>>)> {
    let corrupt = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 28 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if checksum(body) != tail {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let meta_end = 20usize
        .checked_add(meta_len)
        .filter(|e| *e <= body.len())
        .ok_or_else(|| corrupt("meta block overruns file"))?;
    let meta: Meta = serde_json::from_slice(&body[20..meta_end]).map_err(|e| corrupt(&format!("meta block: {e}")))?;
    let mut rest = &body[meta_end..];
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        if rest.len() < n * 4 {
            return Err(corrupt(&format!("tensor `{}` is truncated", t.name)));
        }
        let (blob, tail) = rest.split_at(n * 4);
        tensors.push(
            blob.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    Ok((meta, tensors))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<()> {
    save_checkpoint_with(state, &CheckpointInfo::default(), path)
}

pub fn save_checkpoint_with(state: &NetworkState, info: &CheckpointInfo, path: &Path) -> Result<()> {
    let params = state.params();
    let meta = Meta {
        config: Some(state.config.clone()),
        taxonomy: Some(state.taxonomy.clone()),
        epoch: info.epoch,
        extra: info.extra.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .chain(info.auxiliary.iter().map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            }))
            .collect(),
    };
    for t in &info.auxiliary {
        if t.values.len() != t.shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "auxiliary tensor `{}` has {} values for shape {:?}",
                t.name,
                t.values.len(),
                t.shape
            )));
        }
    }
    let blobs: Vec<&[f32]> = params
        .iter()
        .map(|p| p.value.as_slice())
        .chain(info.auxiliary.iter().map(|t| t.values.as_slice()))
        .collect();
    write_atomic(path, &encode(&meta, &blobs)?)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    load_checkpoint_with(path).map(|(s, _)| s)
}

pub fn load_checkpoint_with(path: &Path) -> Result<(NetworkState, CheckpointInfo)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, tensors) = decode(path, &bytes)?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let config = meta.config.ok_or_else(|| corrupt("no model config".into()))?;
    let taxonomy = meta.taxonomy.ok_or_else(|| corrupt("no taxonomy".into()))?;
    // Weights are overwritten below, so skip pretrained loading here.
    let mut skeleton = config.clone();
    skeleton.pretrained_init = false;
    let mut state = build_model(&skeleton, &taxonomy, 0)?;
    state.config = config;
    let params = state.params_mut();
    if params.len() > meta.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            params.len(),
            meta.tensors.len()
        )));
    }
    let mut tensors = tensors.into_iter();
    let mut entries = meta.tensors.into_iter();
    for ((p, entry), values) in params.into_iter().zip(entries.by_ref()).zip(tensors.by_ref()) {
        if p.name != entry.name || p.shape != entry.shape {
            return Err(corrupt(format!(
                "tensor `{}` {:?} does not match `{}` {:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor `{}` in {} holds non-finite values",
                entry.name,
                path.display()
            )));
        }
        p.value = values;
    }
    let auxiliary = entries
        .zip(tensors)
        .map(|(entry, values)| NamedTensor {
            name: entry.name,
            shape: entry.shape,
            values,
        })
        .collect();
    Ok((
        state,
        CheckpointInfo {
            epoch: meta.epoch,
            extra: meta.extra,
            auxiliary,
        },
    ))
}

/// Loads a checkpoint and insists it was trained for `taxonomy`.
pub fn load_checkpoint_for(path: &Path, taxonomy: &LabelTaxonomy) -> Result<NetworkState> {
    let state = load_checkpoint(path)?;
    ensure_compatible(&state, taxonomy)?;
    Ok(state)
}

pub fn ensure_compatible(state: &NetworkState, taxonomy: &LabelTaxonomy) -> Result<()> {
    if &state.taxonomy != taxonomy {
        return Err(Error::Compatibility(format!(
            "checkpoint classes [{}] ({:?}) differ from expected [{}] ({:?})",
            state.taxonomy.class_names().join(", "),
            state.taxonomy.mode(),
            taxonomy.class_names().join(", "),
            taxonomy.mode(),
        )));
    }
    Ok(())
}

/// Writes the backbone weights as a pretrained artifact and returns its
/// SHA-256, the value to pin in `ModelConfig::pretrained_sha256`.
pub fn save_backbone_weights(state: &NetworkState, path: &Path) -> Result<String> {
    let params = state.backbone.params();
    let meta = Meta {
        config: None,
        taxonomy: None,
        epoch: 0,
        extra: serde_json::Value::Null,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let blobs: Vec<&[f32]> = params.iter().map(|p| p.value.as_slice()).collect();
    let bytes = encode(&meta, &blobs)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn load_pretrained_backbone(state: &mut NetworkState) -> Result<()> {
    let path: PathBuf = state.config.pretrained_path();
    let expected = state.config.pretrained_sha256.clone().unwrap_or_default();
    let artifact_error = |reason: String| Error::WeightArtifact {
        path: path.clone(),
        expected: if expected.is_empty() {
            "<unpinned>".into()
        } else {
            expected.clone()
        },
        reason,
    };
    let bytes = fs::read(&path).map_err(|e| artifact_error(format!("cannot read artifact: {e}")))?;
    if expected.is_empty() {
        return Err(artifact_error("no pretrained_sha256 pinned in the model config".into()));
    }
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&expected) {
        return Err(artifact_error(format!("checksum is {actual}")));
    }
    let (meta, tensors) = decode(&path, &bytes).map_err(|e| artifact_error(e.to_string()))?;
    let mut by_name: HashMap<&str, (&TensorEntry, Vec<f32>)> = meta
        .tensors
        .iter()
        .zip(tensors)
        .map(|(t, v)| (t.name.as_str(), (t, v)))
        .collect();
    for p in state.backbone.params_mut() {
        let (entry, values) = by_name
            .remove(p.name.as_str())
            .ok_or_else(|| artifact_error(format!("tensor `{}` is absent", p.name)))?;
        if entry.shape != p.shape {
            return Err(Error::Config(format!(
                "pretrained tensor `{}` has shape {:?}, model expects {:?}",
                p.name, entry.shape, p.shape
            )));
        }
        p.value = values;
    }
    if state.config.backbone_frozen {
        for p in state.backbone.params_mut() {
            p.trainable = false;
        }
    }
    Ok(())
}

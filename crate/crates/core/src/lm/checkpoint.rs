//! Checkpoint file format.
//!
//! ```text
//! [u64 LE: header length][JSON header][raw little-endian f32 tensor data]
//! ```
//!
//! The header holds the model config and, for each tensor in canonical
//! order, its name, shape and byte offset into the data section. The
//! checkpoint hash is the SHA-256 of the entire file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LmConfig, LmParams, Real};
use crate::error::{Error, Result};
use crate::seeding::sha256_hex;

pub const FORMAT: &str = "xelm-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: LmConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serialize parameters (always stored as `f32`).
pub fn to_bytes<F: Real>(params: &LmParams<F>) -> Vec<u8> {
    let mut offset = 0;
    let tensors: Vec<TensorEntry> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
            };
            offset += t.len() * 4;
            entry
        })
        .collect();
    let header = Header {
        format: FORMAT.to_string(),
        config: params.config,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.named_tensors() {
        for v in &t.data {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn from_bytes<F: Real>(bytes: &[u8], origin: &Path) -> Result<LmParams<F>> {
    let bad = |message: String| Error::Checkpoint {
        path: origin.to_path_buf(),
        message,
    };
    if bytes.len() < 8 {
        return Err(bad("file too short".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let data_start = 8usize
        .checked_add(header_len)
        .filter(|&s| s <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[8..data_start]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(format!("unknown format `{}`", header.format)));
    }
    header.config.validate()?;
    let data = &bytes[data_start..];
    let mut params = LmParams::<F>::zeros(&header.config);
    let slots = params.named_tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            slots.len(),
            header.tensors.len()
        )));
    }
    for ((name, tensor), entry) in slots.into_iter().zip(&header.tensors) {
        if entry.name != name || entry.shape != tensor.shape {
            return Err(bad(format!(
                "tensor `{}` {:?} does not match expected `{name}` {:?}",
                entry.name, entry.shape, tensor.shape
            )));
        }
        let end = entry.offset + tensor.len() * 4;
        let raw = data
            .get(entry.offset..end)
            .ok_or_else(|| bad(format!("tensor `{name}` data out of bounds")))?;
        for (dst, chunk) in tensor.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = F::from_f64_lossy(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    Ok(params)
}

/// Write a checkpoint and return its SHA-256.
pub fn save<F: Real>(params: &LmParams<F>, path: &Path) -> Result<String> {
    let bytes = to_bytes(params);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn load<F: Real>(path: &Path) -> Result<LmParams<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// SHA-256 of a checkpoint file on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash the parameters would have once saved.
pub fn params_hash<F: Real>(params: &LmParams<F>) -> String {
    sha256_hex(&to_bytes(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::init_params;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 259,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
            dropout: 0.0,
        }
    }

    #[test]
    fn save_load_preserves_f32_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params::<f32>(&cfg(), 11).unwrap();
        let hash = save(&p, &path).unwrap();
        assert_eq!(hash, file_hash(&path).unwrap());
        assert_eq!(hash, params_hash(&p));
        let q: LmParams<f32> = load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn truncated_file_rejected() {
        let p = init_params::<f32>(&cfg(), 1).unwrap();
        let bytes = to_bytes(&p);
        let path = Path::new("mem");
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3], path).is_err());
        assert!(from_bytes::<f32>(&bytes[..4], path).is_err());
    }

    #[test]
    fn header_is_json_with_offsets() {
        let p = init_params::<f32>(&cfg(), 1).unwrap();
        let bytes = to_bytes(&p);
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(v["format"], FORMAT);
        assert_eq!(v["tensors"][0]["name"], "tok_emb");
        assert_eq!(v["tensors"][1]["offset"], 259 * 8 * 4);
        assert_eq!(bytes.len(), 8 + n + p.parameter_count() * 4);
    }
}

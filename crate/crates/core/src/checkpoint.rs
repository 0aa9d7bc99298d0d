//! Binary parameter files and atomic output writes.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor, then the raw little-endian tensor data in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::tokenizer::TokenizerConfig;
use crate::Scalar;

pub const MAGIC: &[u8; 8] = b"TSGTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub artifact_version: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    /// Free-form run metadata (config hash, window, step count).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint<T: Scalar>(params: &Parameters<T>, tokenizer: &TokenizerConfig, meta: serde_json::Value) -> Result<Vec<u8>> {
    let width = std::mem::size_of::<T>();
    let mut tensors = Vec::new();
    let mut data = Vec::with_capacity(params.num_params() * width);
    for t in params.tensors() {
        tensors.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset: data.len() });
        data.extend(T::to_le_bytes_vec(t.data));
    }
    let header = CheckpointHeader {
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        dtype: T::DTYPE.into(),
        model: params.config.clone(),
        tokenizer: tokenizer.clone(),
        meta,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &Parameters<T>, tokenizer: &TokenizerConfig, meta: serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, tokenizer, meta)?)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])?;
    Ok((header, &body[len..]))
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    split_header(bytes).map(|(h, _)| h)
}

fn decode_as<S: Scalar>(header: &CheckpointHeader, data: &[u8]) -> Result<Parameters<S>> {
    let width = std::mem::size_of::<S>();
    let mut params = Parameters::<S>::zeros(&header.model);
    let targets = params.tensors_mut();
    if targets.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", targets.len(), header.tensors.len())));
    }
    for (target, entry) in targets.into_iter().zip(&header.tensors) {
        if target.name != entry.name || target.shape != entry.shape {
            return Err(Error::Checkpoint(format!("tensor {} does not match the model layout", entry.name)));
        }
        let end = entry.offset + std::mem::size_of_val(target.data);
        let raw = data.get(entry.offset..end).ok_or_else(|| Error::Checkpoint(format!("tensor {} truncated", entry.name)))?;
        for (slot, chunk) in target.data.iter_mut().zip(raw.chunks_exact(width)) {
            *slot = S::from_le_chunk(chunk);
        }
    }
    Ok(params)
}

/// Parses a checkpoint, converting to `T` if it was stored in the other
/// precision.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Parameters<T>, CheckpointHeader)> {
    let (header, data) = split_header(bytes)?;
    header.model.validate()?;
    let params = match header.dtype.as_str() {
        d if d == T::DTYPE => decode_as::<T>(&header, data)?,
        "f32" => decode_as::<f32>(&header, data)?.cast(),
        "f64" => decode_as::<f64>(&header, data)?.cast(),
        other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    };
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameters".into()));
    }
    Ok((params, header))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Parameters<T>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, EmbeddingMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig { d_model: 8, d_ff: 12, n_layers: 2, n_heads: 2, vocab_size: 10, max_seq_len: 32, dropout: 0.1, embedding_mode: EmbeddingMode::PerPosition, precision: 3 }
    }

    #[test]
    fn roundtrip_is_exact() {
        let params: Parameters<f32> = init_params(&config(), &mut ChaCha8Rng::seed_from_u64(0));
        let meta = serde_json::json!({"window": 3});
        let bytes = encode_checkpoint(&params, &TokenizerConfig::default(), meta.clone()).unwrap();
        let (back, header) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(header.meta, meta);
        assert_eq!(header.dtype, "f32");
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 20 + header_len + params.num_params() * 4);

        let (wide, _) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(wide, params.cast::<f64>());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let params: Parameters<f64> = init_params(&config(), &mut ChaCha8Rng::seed_from_u64(1));
        save_checkpoint(&path, &params, &TokenizerConfig::default(), serde_json::Value::Null).unwrap();
        assert!(!dir.path().join("nested/model.ckpt.tmp").exists());
        let (back, _) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let params: Parameters<f32> = init_params(&config(), &mut ChaCha8Rng::seed_from_u64(2));
        let bytes = encode_checkpoint(&params, &TokenizerConfig::default(), serde_json::Value::Null).unwrap();
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode_checkpoint::<f32>(b"garbage that is long enough").is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_checkpoint::<f32>(&bad).is_err());
    }
}

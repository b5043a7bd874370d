//! Self-describing weight container.
//!
//! Layout: magic `CENH`, format version (u16 LE), a length-prefixed (u32 LE)
//! UTF-8 JSON manifest carrying the model config and an ordered tensor index
//! `{name, shape, byte offset}`, the raw tensor payloads as little-endian
//! 32-bit IEEE-754 floats in manifest order, and a trailing CRC-32 of every
//! byte before it.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CENH";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightsIoError {
    #[error("weights file i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a weights container (bad magic bytes)")]
    BadMagic,
    #[error("unknown weights container version {got} (supported: {supported})")]
    UnknownVersion { got: u16, supported: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("manifest is not valid JSON: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest disagrees with payload for tensor `{name}`: {reason}")]
    ShapeDisagreement { name: String, reason: String },
    #[error("file too short to be a weights container ({len} bytes)")]
    Truncated { len: usize },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    offset: u64,
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
pub(crate) fn crc32(data: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Serializes weights and their config; the round trip is bitwise lossless.
pub fn save_weights(
    weights: &ModelWeights,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<(), WeightsIoError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (name, tensor) in weights.iter() {
        let s = tensor.shape();
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: [s.n, s.c, s.h, s.w],
            offset,
        });
        offset += (s.len() * 4) as u64;
    }
    let manifest = Manifest { config: config.clone(), tensors: entries };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut buf = Vec::with_capacity(10 + manifest_json.len() + offset as usize + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for (_, tensor) in weights.iter() {
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a weights container back; the file is self-describing, so the
/// embedded config is returned alongside the tensors.
pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelWeights, ModelConfig), WeightsIoError> {
    let buf = fs::read(path)?;
    if buf.len() < 14 {
        return Err(WeightsIoError::Truncated { len: buf.len() });
    }
    if &buf[0..4] != MAGIC {
        return Err(WeightsIoError::BadMagic);
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != FORMAT_VERSION {
        return Err(WeightsIoError::UnknownVersion { got: version, supported: FORMAT_VERSION });
    }

    let body = &buf[..buf.len() - 4];
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(WeightsIoError::ChecksumMismatch { stored, computed });
    }

    let manifest_len = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes")) as usize;
    if 10 + manifest_len > body.len() {
        return Err(WeightsIoError::Truncated { len: buf.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&buf[10..10 + manifest_len])?;
    let payload = &body[10 + manifest_len..];

    let mut expected_offset = 0u64;
    let mut weights = ModelWeights::new();
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(WeightsIoError::ShapeDisagreement {
                name: entry.name.clone(),
                reason: format!(
                    "declared offset {} but preceding shapes end at {}",
                    entry.offset, expected_offset
                ),
            });
        }
        let [n, c, h, w] = entry.shape;
        let shape = Shape::new(n, c, h, w);
        let nbytes = shape.len() * 4;
        let start = entry.offset as usize;
        if start + nbytes > payload.len() {
            return Err(WeightsIoError::ShapeDisagreement {
                name: entry.name.clone(),
                reason: format!(
                    "shape {shape} needs {nbytes} bytes at offset {start} but payload has {}",
                    payload.len()
                ),
            });
        }
        let data: Vec<f32> = payload[start..start + nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|_| WeightsIoError::ShapeDisagreement {
            name: entry.name.clone(),
            reason: "shape/data length disagreement".to_string(),
        })?;
        weights.insert(entry.name.clone(), tensor);
        expected_offset += nbytes as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(WeightsIoError::ShapeDisagreement {
            name: "<payload>".to_string(),
            reason: format!(
                "manifest accounts for {expected_offset} payload bytes, file has {}",
                payload.len()
            ),
        });
    }
    Ok((weights, manifest.config))
}

//! Binary checkpoint container.
//!
//! Layout: `MOECKPT1`, a little-endian `u64` header length, a UTF-8 JSON
//! header `{config, tensors: [{name, shape, dtype, offset}]}`, then raw
//! little-endian `f32` blobs in manifest order. `offset` is relative to the
//! first blob byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{ModelConfig, MoeModel};

pub const MAGIC: &[u8; 8] = b"MOECKPT1";
const PREFIX: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

pub fn write_checkpoint(model: &MoeModel) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::new();
    for (name, t) in model.named_params() {
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.named_params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<MoeModel> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "bad magic, expected MOECKPT1"));
    }
    if bytes.len() < PREFIX {
        return Err(format_err(MAGIC.len(), "truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = PREFIX
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            format_err(
                MAGIC.len(),
                format!("header length {header_len} exceeds file size {}", bytes.len()),
            )
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..blob_start]).map_err(|e| {
        let col = if e.line() == 1 { e.column().saturating_sub(1) } else { 0 };
        format_err(PREFIX + col, format!("header: {e}"))
    })?;
    header
        .config
        .validate()
        .map_err(|e| format_err(PREFIX, format!("header config: {e}")))?;

    let expected = MoeModel::<f32>::expected_manifest(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(format_err(
            PREFIX,
            format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            ),
        ));
    }
    let blobs = &bytes[blob_start..];
    let mut next = 0u64;
    let mut data = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(format_err(
                PREFIX,
                format!("manifest name `{}` where `{name}` was expected", entry.name),
            ));
        }
        if &entry.shape != shape {
            return Err(format_err(
                PREFIX,
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", entry.shape),
            ));
        }
        if entry.dtype != "f32" {
            return Err(format_err(
                PREFIX,
                format!("tensor `{name}` has dtype `{}`, only f32 is supported", entry.dtype),
            ));
        }
        if entry.offset != next {
            return Err(format_err(
                blob_start + next as usize,
                format!("tensor `{name}` offset {} is not contiguous ({next})", entry.offset),
            ));
        }
        let n: usize = shape.iter().product();
        let start = next as usize;
        let end = start + 4 * n;
        if end > blobs.len() {
            return Err(format_err(
                blob_start + blobs.len(),
                format!(
                    "truncated blob for `{name}`: needs {} bytes, {} present",
                    4 * n,
                    blobs.len().saturating_sub(start)
                ),
            ));
        }
        let values: Vec<f32> = blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        data.push(Tensor::new(shape.clone(), values)?);
        next = end as u64;
    }
    if next as usize != blobs.len() {
        return Err(format_err(
            blob_start + next as usize,
            format!("{} trailing bytes after the last tensor", blobs.len() - next as usize),
        ));
    }

    let mut model = MoeModel::init(header.config, 0)?;
    for (slot, t) in model.params_mut().into_iter().zip(data) {
        *slot = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MoeModel> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MoeModel {
        MoeModel::init(
            ModelConfig {
                n_layers: 2,
                n_experts: 3,
                k_baseline: 1,
                d_model: 4,
                d_ff: 6,
                vocab_size: 8,
                max_seq_len: 5,
                n_heads: 2,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let m = tiny();
        save_checkpoint(&m, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.config, m.config);
        for ((_, x), (_, y)) in loaded.named_params().iter().zip(m.named_params()) {
            assert_eq!(x.shape(), y.shape());
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = write_checkpoint(&tiny()).unwrap();
        bytes[3] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn corrupted_manifest_field_is_named() {
        let bytes = write_checkpoint(&tiny()).unwrap();
        let pos = bytes
            .windows(7)
            .position(|w| w == b"\"shape\"")
            .unwrap();
        let mut bad = bytes.clone();
        bad[pos + 3] = b'x';
        match read_checkpoint(&bad) {
            Err(Error::Format { offset, detail }) => {
                assert!(detail.contains("shxpe"), "{detail}");
                assert!(offset as usize >= PREFIX);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_tensor_name_is_named() {
        let bytes = write_checkpoint(&tiny()).unwrap();
        let pos = bytes.windows(7).position(|w| w == b"pos_emb").unwrap();
        let mut bad = bytes.clone();
        bad[pos] = b'q';
        match read_checkpoint(&bad) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("qos_emb"), "{detail}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn short_blob_is_a_truncation_error() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_experts: 2,
            k_baseline: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 8,
            max_seq_len: 4,
            n_heads: 1,
        };
        let m = MoeModel::init(cfg, 0).unwrap();
        assert_eq!(m.tok_emb.shape(), &[8, 4]);
        // keep only 7×4 values of the first tensor
        let bytes = write_checkpoint(&m).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let cut = PREFIX + header_len + 7 * 4 * 4;
        match read_checkpoint(&bytes[..cut]) {
            Err(Error::Format { offset, detail }) => {
                assert!(detail.contains("truncated"), "{detail}");
                assert_eq!(offset as usize, cut);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_header_length_is_rejected() {
        let mut bytes = write_checkpoint(&tiny()).unwrap();
        bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format { offset: 8, .. })));
    }
}

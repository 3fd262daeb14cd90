//! Checkpoint file: `"DSCK"`, format version (u16), header length (u32),
//! JSON header (config, head mode, seed, dtype, tensor table with shapes
//! and per-tensor checksums, free-form metadata), raw little-endian tensor
//! data in table order, trailing CRC-64 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::linalg::Scalar;
use super::params::{ParamStore, TensorInfo};
use super::transformer::Transformer;
use super::{HeadMode, TransformerConfig};
use crate::error::{Error, Result};
use crate::packing::checksum;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    checksum: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u16,
    dtype: String,
    config: TransformerConfig,
    head_mode: HeadMode,
    seed: u64,
    mixed_precision: bool,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

pub fn checkpoint_bytes<F: Scalar>(model: &Transformer<F>, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let p = &model.params;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: F::DTYPE.to_string(),
        config: model.config.clone(),
        head_mode: model.head_mode,
        seed: model.seed,
        mixed_precision: model.mixed_precision,
        tensors: p
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                checksum: p.tensor_checksum(i),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(10 + json.len() + p.len() * F::BYTES + 8);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &x in &p.data {
        x.write_le(&mut out);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Write a checkpoint; returns the file checksum.
pub fn save_checkpoint<F: Scalar>(model: &Transformer<F>, metadata: &serde_json::Value, path: &Path) -> Result<u64> {
    let bytes = checkpoint_bytes(model, metadata)?;
    let sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sum)
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(Transformer<F>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 18 {
        return Err(Error::Shape("checkpoint too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let expected = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = checksum(body);
    if expected != actual {
        return Err(Error::Checksum { expected, actual });
    }
    if body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Magic);
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(body.get(10..10 + hlen).ok_or(Error::Shape("truncated header".into()))?)?;
    if header.dtype != F::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint holds {} parameters, requested {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let data_bytes = &body[10 + hlen..];
    if data_bytes.len() % F::BYTES != 0 {
        return Err(Error::Shape("parameter payload is not a whole number of values".into()));
    }
    let data: Vec<F> = data_bytes.chunks_exact(F::BYTES).map(F::read_le).collect();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for t in &header.tensors {
        let info = TensorInfo {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        };
        offset += info.numel();
        tensors.push(info);
    }
    if offset != data.len() {
        return Err(Error::Shape(format!("tensor table covers {offset} values, payload has {}", data.len())));
    }
    let params = ParamStore { data, tensors };
    for (i, t) in header.tensors.iter().enumerate() {
        let actual = params.tensor_checksum(i);
        if actual != t.checksum {
            return Err(Error::Checksum {
                expected: t.checksum,
                actual,
            });
        }
    }
    let mut model = Transformer::from_params(&header.config, header.head_mode, header.seed, params)?;
    model.mixed_precision = header.mixed_precision;
    Ok((model, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_transformer;

    #[test]
    fn roundtrip_and_corruption() {
        let cfg = TransformerConfig {
            hidden_dim: 8,
            n_heads: 2,
            n_layers: 1,
            context_length: 8,
            vocab_size: 10,
            ffn_multiple_of: 4,
            ..TransformerConfig::preset("tiny").unwrap()
        };
        let m: Transformer<f32> = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 2 }, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let meta = serde_json::json!({"run": "x"});
        save_checkpoint(&m, &meta, &p).unwrap();
        let (back, meta2): (Transformer<f32>, _) = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert!(load_checkpoint::<f64>(&p).is_err());
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checksum { .. })));
    }
}

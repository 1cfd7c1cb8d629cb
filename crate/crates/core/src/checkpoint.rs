//! Binary checkpoint format.
//!
//! ```text
//! "MATKCKPT" | u64 LE header length | JSON header | f32 LE blobs
//! ```
//!
//! The header holds the embedder config, the training loss tag, the init
//! seed and the tensor shapes in storage order; blobs follow in that order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{EmbedderConfig, ModelParams, TrainingLoss};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MATKCKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}: not a checkpoint (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: corrupt header: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("{path}: header shapes {found:?} do not match the config's {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        expected: Vec<Vec<usize>>,
        found: Vec<Vec<usize>>,
    },
    #[error("{path}: truncated blob (expected {expected} bytes, found {found})")]
    TruncatedBlob {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} trailing bytes after the last blob")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EmbedderConfig,
    training_loss_tag: TrainingLoss,
    seed: u64,
    shapes: Vec<Vec<usize>>,
}

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let header = Header {
        config: model.config.clone(),
        training_loss_tag: model.training_loss,
        seed: model.seed,
        shapes: model.tensors.iter().map(|t| t.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let blob_len: usize = model.tensors.iter().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + blob_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &model.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams, CheckpointError> {
    let corrupt = |reason: String| CheckpointError::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic(path.to_path_buf()));
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| corrupt("missing header length".into()))?
        .try_into()
        .expect("8 bytes");
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| corrupt("header length overflows".into()))?;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| corrupt(e.to_string()))?;

    let expected = header.config.param_shapes();
    if expected != header.shapes {
        return Err(CheckpointError::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            found: header.shapes,
        });
    }
    let blob = &bytes[header_end..];
    let needed: usize = header
        .shapes
        .iter()
        .map(|s| s.iter().product::<usize>() * 4)
        .sum();
    if blob.len() < needed {
        return Err(CheckpointError::TruncatedBlob {
            path: path.to_path_buf(),
            expected: needed,
            found: blob.len(),
        });
    }
    if blob.len() > needed {
        return Err(CheckpointError::TrailingBytes {
            path: path.to_path_buf(),
            extra: blob.len() - needed,
        });
    }

    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        let t = Tensor::new(shape.clone(), data).map_err(|e| corrupt(e.to_string()))?;
        tensors.push(Arc::new(t));
    }
    Ok(ModelParams {
        config: header.config,
        tensors,
        training_loss: header.training_loss_tag,
        seed: header.seed,
    })
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;
    use crate::embedder::init_model;

    fn model() -> ModelParams {
        let cfg = EmbedderConfig::new(ImageShape::new(4, 2, 1), vec![5], 3).with_classes(2);
        init_model(&cfg, 11).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn truncated_and_trailing() {
        let bytes = encode_checkpoint(&model());
        let err = decode_checkpoint(&bytes[..bytes.len() - 3], Path::new("m")).unwrap_err();
        assert!(matches!(err, CheckpointError::TruncatedBlob { .. }));
        assert!(err.to_string().contains("truncated blob"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_checkpoint(&extra, Path::new("m")).unwrap_err(),
            CheckpointError::TrailingBytes { extra: 1, .. }
        ));
    }

    #[test]
    fn bad_magic_and_header() {
        let mut bytes = encode_checkpoint(&model());
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("m")).unwrap_err(),
            CheckpointError::BadMagic(_)
        ));
        let mut bytes = encode_checkpoint(&model());
        bytes[17] = b'#';
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("m")).unwrap_err(),
            CheckpointError::CorruptHeader { .. }
        ));
    }

    #[test]
    fn edited_feature_dim_is_a_shape_mismatch() {
        let bytes = encode_checkpoint(&model());
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let edited = json.replace("\"feature_dim\":3", "\"feature_dim\":4");
        assert_ne!(edited, json);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        assert!(matches!(
            decode_checkpoint(&out, Path::new("m")).unwrap_err(),
            CheckpointError::ShapeMismatch { .. }
        ));
    }
}

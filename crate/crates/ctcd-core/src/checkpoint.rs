//! Checkpoint archive: parameter name -> (shape, raw little-endian bytes),
//! plus the model config and a precision tag. Writing is deterministic
//! (parameters in model order), so equal parameter sets produce equal files.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::model::{parameter_shapes, ModelConfig, ModelParameters};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTCDCKPT";
const VERSION: u32 = 1;

pub fn checkpoint_bytes<S: Scalar>(params: &ModelParameters<S>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&params.config)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(S::PRECISION.tag());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    Ok(buf)
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParameters<S>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let bytes = checkpoint_bytes(params)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint_bytes<S: Scalar>(bytes: &[u8]) -> Result<ModelParameters<S>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(CoreError::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::CheckpointFormat(format!("unsupported version {}", version)));
    }
    let tag = cur.take(1)?[0];
    let precision = Precision::from_tag(tag)
        .ok_or_else(|| CoreError::CheckpointFormat(format!("unknown precision tag {}", tag)))?;
    if precision != S::PRECISION {
        return Err(CoreError::CheckpointFormat(format!(
            "checkpoint precision {} does not match requested {}",
            precision,
            S::PRECISION
        )));
    }
    let config_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)?;
    config.validate()?;

    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let expected = parameter_shapes(&config);
    if count != expected.len() {
        return Err(CoreError::CheckpointFormat(format!(
            "checkpoint has {} tensors, config requires {}",
            count,
            expected.len()
        )));
    }

    let mut named = Vec::with_capacity(count);
    for (expect_name, expect_shape) in &expected {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CoreError::CheckpointFormat("non-utf8 parameter name".into()))?
            .to_string();
        if &name != expect_name {
            return Err(CoreError::CheckpointFormat(format!(
                "parameter `{}` out of order (expected `{}`)",
                name, expect_name
            )));
        }
        let ndims = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
        }
        if &shape != expect_shape {
            return Err(CoreError::CheckpointFormat(format!(
                "parameter `{}` has shape {:?}, config requires {:?}",
                name, shape, expect_shape
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * S::BYTE_WIDTH)?;
        let data: Vec<S> = raw.chunks_exact(S::BYTE_WIDTH).map(S::read_le).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    ModelParameters::from_tensors(config, named)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParameters<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CoreError::MissingCheckpoint(format!("{}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    load_checkpoint_bytes(&bytes)
}

/// Hex SHA-256 of a serialized checkpoint; the determinism and frozen-model
/// criteria compare these.
pub fn checkpoint_hash<S: Scalar>(params: &ModelParameters<S>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint_bytes(params)?)))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::CheckpointFormat("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

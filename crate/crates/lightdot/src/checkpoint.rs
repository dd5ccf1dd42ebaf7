//! Model checkpoints: a self-describing little-endian binary holding the
//! configuration, training metadata and every named parameter tensor at full
//! f64 precision, so save → load is bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::encoder::ModelParams;
use crate::error::{io_err, LdError, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"LDOT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Validation average recall at save time; NaN-free, -1.0 when unknown.
    pub val_ar: f64,
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> LdError {
    LdError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let c = &params.config;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for f in [
        c.layers, c.dim, c.heads, c.ffn, c.vocab, c.classes, c.feature_dim, c.n_max, c.t_max,
    ] {
        buf.extend_from_slice(&(f as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.hash().to_le_bytes());
    buf.extend_from_slice(&meta.step.to_le_bytes());
    buf.extend_from_slice(&meta.val_ar.to_le_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            buf.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, path: &Path) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(
                path,
                format!("truncated: need {} bytes at offset {}", n, self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, path: &Path) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, path)?.try_into().unwrap()))
    }
    fn u64(&mut self, path: &Path) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, path)?.try_into().unwrap()))
    }
    fn f64(&mut self, path: &Path) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, path)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut c = Cursor { buf: &bytes, pos: 0 };
    let magic = c.take(4, path)?;
    if magic != CKPT_MAGIC {
        return Err(fmt_err(path, format!("bad magic {:?}", magic)));
    }
    let version = c.u32(path)?;
    if version != CKPT_VERSION {
        return Err(fmt_err(path, format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 9];
    for f in fields.iter_mut() {
        *f = c.u32(path)? as usize;
    }
    let config = ModelConfig {
        layers: fields[0],
        dim: fields[1],
        heads: fields[2],
        ffn: fields[3],
        vocab: fields[4],
        classes: fields[5],
        feature_dim: fields[6],
        n_max: fields[7],
        t_max: fields[8],
    };
    let stored_hash = c.u32(path)?;
    if stored_hash != config.hash() {
        return Err(LdError::ConfigMismatch {
            expected: config.hash(),
            found: stored_hash,
        });
    }
    let meta = CheckpointMeta {
        step: c.u64(path)?,
        val_ar: c.f64(path)?,
    };
    let count = c.u32(path)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u32(path)? as usize;
        let name = String::from_utf8(c.take(nlen, path)?.to_vec())
            .map_err(|e| fmt_err(path, e.to_string()))?;
        let rank = c.u32(path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64(path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(c.f64(path)?);
        }
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(fmt_err(path, format!("duplicate tensor '{name}'")));
        }
    }
    if c.pos != bytes.len() {
        return Err(fmt_err(
            path,
            format!("{} trailing bytes after tensor table", bytes.len() - c.pos),
        ));
    }
    Ok((ModelParams { config, tensors }, meta))
}

/// Load a checkpoint and refuse it unless it was built from `expected`.
pub fn load_checkpoint_for(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(ModelParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path)?;
    if params.config != *expected {
        return Err(LdError::ConfigMismatch {
            expected: expected.hash(),
            found: params.config.hash(),
        });
    }
    Ok((params, meta))
}

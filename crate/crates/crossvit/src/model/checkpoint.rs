//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic          4 bytes  "CRVT"
//! version        u32      currently 1
//! config_len     u64      followed by that many bytes of model-config TOML
//! tensor_count   u64
//! per tensor:
//!     name_len   u64      followed by the UTF-8 name
//!     rank       u64
//!     dims       rank × u64
//!     offset     u64      absolute file offset of this tensor's payload
//! payload        f32 arrays in directory order
//! ```
//!
//! Values are stored as `f32`; loading widens them back to `f64`, so a
//! save → load → save round-trip is byte-identical.

use std::path::Path;

use crate::config::{model_config_from_toml, model_config_to_toml, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{skeleton, Parameters};

const MAGIC: &[u8; 4] = b"CRVT";
const VERSION: u32 = 1;

/// Serializes parameters and their config. The parameter traversal order
/// defines the directory order, so identical models produce identical bytes.
pub fn save_checkpoint(params: &Parameters, config: &ModelConfig, path: &Path) -> Result<()> {
    let bytes = to_bytes(params, config);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn to_bytes(params: &Parameters, config: &ModelConfig) -> Vec<u8> {
    let config_text = model_config_to_toml(config);
    let entries = params.flatten();

    let mut dir_len = 8; // tensor_count
    for (name, t) in &entries {
        dir_len += 8 + name.len() + 8 + 8 * t.shape().len() + 8;
    }
    let header_len = 4 + 4 + 8 + config_text.len() + dir_len;

    let mut out = Vec::with_capacity(header_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, t) in &entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    for (_, t) in &entries {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a checkpoint back into parameters and the embedded config. Every
/// directory entry is validated against the shape the config implies; a
/// disagreement is reported with the offending tensor's name.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, ModelConfig)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<(Parameters, ModelConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {VERSION}"
        )));
    }
    let config_len = r.u64()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("config text is not UTF-8: {e}")))?;
    let config = model_config_from_toml(config_text)?;

    let count = r.u64()? as usize;
    let mut directory = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u64()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!(
                "{name}: implausible rank {rank}"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        directory.push((name, dims, offset));
    }

    let shapes = skeleton(&config)?;
    let expected = shapes.flatten();
    if expected.len() != directory.len() {
        return Err(Error::Checkpoint(format!(
            "directory lists {} tensors, config implies {}",
            directory.len(),
            expected.len()
        )));
    }

    let mut loaded: Vec<Tensor> = Vec::with_capacity(directory.len());
    for ((name, dims, offset), (want_name, want)) in directory.iter().zip(&expected) {
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "directory entry {name:?} does not match expected tensor {want_name:?}"
            )));
        }
        if dims != want.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {dims:?} disagrees with config shape {:?}",
                want.shape()
            )));
        }
        let numel: usize = dims.iter().product();
        let end = offset + 4 * numel;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: payload at {offset}..{end} exceeds file length {}",
                bytes.len()
            )));
        }
        let data = bytes[*offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        loaded.push(Tensor::from_vec(dims.clone(), data)?);
    }

    let mut i = 0;
    let params = shapes.map(&mut |_| {
        let t = loaded[i].clone();
        i += 1;
        t
    });
    Ok((params, config))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at {}, have {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

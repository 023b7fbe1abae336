//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`, all reals little-endian `f64`):
//!
//! ```text
//! magic "CFCPARAM" | version | metadata length | metadata (UTF-8)
//! layer count | per layer: kernel, c_in, c_out, weights..., biases...
//! ```
//!
//! Gradients are not stored. Loading a saved file reproduces the weights bit
//! for bit.

use std::path::Path;

use super::params::{ConvLayer, ParamSet};
use crate::depth_io::{read_file, write_file};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CFCPARAM";
pub const VERSION: u32 = 1;

pub fn encode_params(params: &ParamSet, metadata: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + metadata.len() + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for layer in params.layers() {
        for d in [layer.kernel, layer.c_in, layer.c_out] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in layer.weight.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decodes a checkpoint into its parameters and metadata string.
pub fn decode_params(bytes: &[u8]) -> Result<(ParamSet, String)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = cur.u32()? as usize;
    let metadata = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?
        .to_owned();
    let count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let kernel = cur.u32()? as usize;
        let c_in = cur.u32()? as usize;
        let c_out = cur.u32()? as usize;
        let weight = cur.f64s(kernel * kernel * c_in * c_out)?;
        let bias = cur.f64s(c_out)?;
        layers.push(ConvLayer::from_weights(kernel, c_in, c_out, weight, bias)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok((ParamSet::from_layers(layers), metadata))
}

pub fn save_params(params: &ParamSet, metadata: &str, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_params(params, metadata))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(ParamSet, String)> {
    decode_params(&read_file(path.as_ref())?)
}

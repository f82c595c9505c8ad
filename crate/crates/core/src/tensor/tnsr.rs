//! The `TNSR` binary blob: magic, version byte, rank byte, little-endian u32 dims, f32 LE data.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;

pub fn write_tnsr<W: Write>(tensor: &Tensor, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(6 + 4 * tensor.shape().len() + 4 * tensor.numel());
    buf.extend_from_slice(TNSR_MAGIC);
    buf.push(TNSR_VERSION);
    buf.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

/// Decodes a blob, rejecting truncation, trailing bytes, and unknown versions.
pub fn read_tnsr<R: Read>(mut input: R, origin: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(origin, e))?;
    decode(&bytes, origin)
}

fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let corrupt = |detail: &str| Error::Corrupt {
        path: origin.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != TNSR_MAGIC {
        return Err(corrupt("missing TNSR magic"));
    }
    if bytes[4] != TNSR_VERSION {
        return Err(Error::Version {
            found: bytes[4] as u32,
            expected: TNSR_VERSION as u32,
        });
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(corrupt("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != numel * 4 {
        return Err(corrupt(&format!(
            "expected {} data bytes, found {}",
            numel * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

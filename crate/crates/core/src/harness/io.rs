//! File helpers shared by datasets, checkpoints and reports.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a TNSR blob and returns its SHA-256.
pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<String> {
    let mut bytes = Vec::with_capacity(tensor.numel() * 4 + 64);
    write_tnsr(tensor, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a TNSR blob. Structural damage is reported before a hash mismatch.
pub fn load_tensor(path: &Path, expected_sha256: Option<&str>) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensor = read_tnsr(bytes.as_slice(), path)?;
    if let Some(expected) = expected_sha256 {
        if sha256_hex(&bytes) != expected {
            return Err(Error::HashMismatch { path: path.to_path_buf() });
        }
    }
    Ok(tensor)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt { path: path.to_path_buf(), detail: e.to_string() })
}

/// 8-bit binary PGM of a single-channel image in `[−1, 1]`.
pub fn save_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let (h, w) = match shape {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::shape("pgm", format!("expected one channel, got {shape:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

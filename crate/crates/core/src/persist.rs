//! Flat binary matrices with JSON sidecars, and content hashes for caches.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SWMATRX1";

/// Hex SHA-256 of a slice of doubles (little endian bytes).
pub fn hash_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 of a sequence of byte strings.
pub fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Row-major matrix of doubles; `complex` doubles the payload with interleaved parts.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, complex: bool, data: &[f64]) -> Result<()> {
    let expect = rows * cols * if complex { 2 } else { 1 };
    if data.len() != expect {
        return Err(Error::Shape(format!("matrix payload has {} values, expected {expect}", data.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    w.write_all(&(complex as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, bool, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Shape("not a matrix file".into()));
    }
    let mut b = [0u8; 8];
    let mut head = [0u64; 3];
    for v in head.iter_mut() {
        r.read_exact(&mut b)?;
        *v = u64::from_le_bytes(b);
    }
    let (rows, cols, complex) = (head[0] as usize, head[1] as usize, head[2] != 0);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let expect = rows * cols * if complex { 2 } else { 1 };
    if bytes.len() != expect * 8 {
        return Err(Error::Shape(format!("matrix payload has {} bytes, expected {}", bytes.len(), expect * 8)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((rows, cols, complex, data))
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn write_sidecar<T: Serialize>(bin: &Path, meta: &T) -> Result<()> {
    std::fs::write(sidecar_path(bin), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_sidecar<T: DeserializeOwned>(bin: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(sidecar_path(bin))?)?)
}

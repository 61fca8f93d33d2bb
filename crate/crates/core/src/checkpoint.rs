//! Versioned binary container for flat parameter vectors.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    b"TKCK"
//! version  u32
//! kind     u32 length + utf-8 bytes
//! config   u64 length + JSON bytes
//! hash     32 bytes, SHA-256 of the config JSON
//! params   u64 count + count * f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TKCK";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn encode<C: Serialize>(kind: &str, config: &C, params: &[f64]) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(config)?;
    let mut out = Vec::with_capacity(64 + cfg.len() + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    out.extend_from_slice(kind.as_bytes());
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&Sha256::digest(&cfg));
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::format("checkpoint", "truncated"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u32(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().expect("8 bytes")))
}

pub fn decode<C: DeserializeOwned>(kind: &str, mut buf: &[u8]) -> Result<(C, Vec<f64>)> {
    let bad = |r: &str| Error::format("checkpoint", r);
    if take(&mut buf, 4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = take_u32(&mut buf)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let klen = take_u32(&mut buf)? as usize;
    let found = take(&mut buf, klen)?;
    if found != kind.as_bytes() {
        return Err(bad(&format!(
            "expected a {kind} checkpoint, found {}",
            String::from_utf8_lossy(found)
        )));
    }
    let clen = take_u64(&mut buf)? as usize;
    let cfg = take(&mut buf, clen)?;
    let hash = take(&mut buf, 32)?;
    if Sha256::digest(cfg).as_slice() != hash {
        return Err(bad("config hash mismatch"));
    }
    let config: C = serde_json::from_slice(cfg)?;
    let n = take_u64(&mut buf)? as usize;
    let raw = take(&mut buf, n.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
    if !buf.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((config, params))
}

pub fn save<C: Serialize>(path: &Path, kind: &str, config: &C, params: &[f64]) -> Result<()> {
    let bytes = encode(kind, config, params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes)
}

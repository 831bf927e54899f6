//! The `CKS1` single-file container.
//!
//! ```text
//! "CKS1" | header_len: u32 LE | header: UTF-8 JSON | payload | crc32: u32 LE
//! ```
//!
//! The CRC32 (IEEE) covers every byte before the footer. Volumes, masks and
//! checkpoints all use this layout and differ only in their header schema
//! and payload encoding.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CKS1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("container headers serialize to JSON");
    let mut out = Vec::with_capacity(header.len() + payload.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Splits a container into its parsed header and raw payload. `origin`
/// only labels errors.
pub fn decode<H: DeserializeOwned>(bytes: &[u8], origin: &Path) -> Result<(H, Vec<u8>)> {
    if bytes.len() < 12 {
        return Err(Error::format(origin, "file too short for a CKS1 container"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(origin, "bad magic bytes, expected \"CKS1\""));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().unwrap());
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if 8 + header_len > body.len() {
        return Err(Error::format(
            origin,
            format!("header length {header_len} runs past end of file"),
        ));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::format(origin, "CRC32 checksum mismatch"));
    }
    let header = serde_json::from_slice(&body[8..8 + header_len])
        .map_err(|e| Error::format(origin, format!("malformed header: {e}")))?;
    Ok((header, body[8 + header_len..].to_vec()))
}

pub fn write<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    fs::write(path, encode(header, payload)).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub(crate) fn f32s_to_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

pub(crate) fn f64s_to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

pub(crate) fn bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

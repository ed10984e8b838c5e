//! The on-disk container shared by packs, datasets, and checkpoints: a
//! directory holding a JSON manifest next to a flat little-endian `f32` blob.
//!
//! Blob layout:
//!
//! ```text
//! offset 0   8 bytes   magic (e.g. b"SSDPACK1")
//! offset 8   u32 LE    first count  (meaning depends on the magic)
//! offset 12  u32 LE    second count
//! offset 16  f32 LE    payload, densely packed
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 16;

pub const PACK_MAGIC: &[u8; 8] = b"SSDPACK1";
pub const DATA_MAGIC: &[u8; 8] = b"SSDDATA1";
pub const CKPT_MAGIC: &[u8; 8] = b"SSDCKPT1";

#[derive(Debug)]
pub struct Blob {
    pub first: u32,
    pub second: u32,
    pub payload: Vec<f32>,
}

impl Blob {
    /// Byte offset in the file of payload element `index`.
    pub fn offset_of(index: usize) -> u64 {
        (HEADER_LEN + 4 * index) as u64
    }
}

pub fn encode_blob(magic: &[u8; 8], first: u32, second: u32, payload: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&first.to_le_bytes());
    bytes.extend_from_slice(&second.to_le_bytes());
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn write_blob(path: &Path, magic: &[u8; 8], first: u32, second: u32, payload: &[f32]) -> Result<()> {
    fs::write(path, encode_blob(magic, first, second, payload)).map_err(|e| Error::io(path, e))
}

/// Read and check a blob. `expected_len` maps the two header counts to the
/// payload length the caller requires; any shortfall or surplus is reported
/// at the byte where the file stops matching.
pub fn read_blob(
    path: &Path,
    magic: &[u8; 8],
    expected_len: impl FnOnce(u32, u32) -> Result<usize>,
) -> Result<Blob> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_blob(path, &bytes, magic, expected_len)
}

pub fn decode_blob(
    path: &Path,
    bytes: &[u8],
    magic: &[u8; 8],
    expected_len: impl FnOnce(u32, u32) -> Result<usize>,
) -> Result<Blob> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("header truncated: need {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            path,
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let first = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let second = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let want = expected_len(first, second)?;
    let body = &bytes[HEADER_LEN..];
    let want_bytes = want.checked_mul(4).ok_or_else(|| {
        Error::format(path, 8, format!("header counts {first}, {second} overflow"))
    })?;
    if body.len() < want_bytes {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!(
                "payload truncated: expected {} bytes in total, file ends after {}",
                HEADER_LEN + want_bytes,
                bytes.len()
            ),
        ));
    }
    if body.len() > want_bytes {
        return Err(Error::format(
            path,
            (HEADER_LEN + want_bytes) as u64,
            format!("{} trailing bytes after payload", body.len() - want_bytes),
        ));
    }
    let payload: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            path,
            Blob::offset_of(i),
            format!("non-finite value {}", payload[i]),
        ));
    }
    Ok(Blob {
        first,
        second,
        payload,
    })
}

/// Deterministic JSON: pretty-printed, trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("unserializable manifest: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_json(path, &text)
}

pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &[u8]) -> Result<T> {
    serde_json::from_slice(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::format(path, offset, e.to_string())
    })
}

/// Convert serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &[u8], line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive(|&b| b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len()) as u64
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

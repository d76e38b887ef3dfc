//! `MELS` flat binary matrix container.
//!
//! Layout, all little-endian: magic `b"MELS"`, `version: u32`, `rows: u32`,
//! `cols: u32`, then `rows * cols` row-major `f32` values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MELS_MAGIC: &[u8; 4] = b"MELS";
pub const MELS_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Appends the encoded `[rows, cols]` view of `t` to `out`.
pub fn encode_mels(t: &Tensor, out: &mut Vec<u8>) {
    let (rows, cols) = (t.rows(), t.cols());
    out.extend_from_slice(MELS_MAGIC);
    out.extend_from_slice(&MELS_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Decodes one record from the front of `bytes`; returns the matrix and bytes consumed.
pub fn decode_mels(bytes: &[u8]) -> Result<(Tensor, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated MELS header".into()));
    }
    if &bytes[..4] != MELS_MAGIC {
        return Err(Error::Format("bad MELS magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != MELS_VERSION {
        return Err(Error::Format(format!("unsupported MELS version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let n = rows * cols;
    let end = HEADER_LEN + 4 * n;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "MELS payload truncated: need {n} floats"
        )));
    }
    let data = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((Tensor::new(vec![rows, cols], data), end))
}

pub fn write_mels(path: impl AsRef<Path>, frames: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    encode_mels(frames, &mut buf);
    std::fs::write(path.as_ref(), buf).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_mels(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let (t, used) = decode_mels(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format("trailing bytes after MELS record".into()));
    }
    Ok(t)
}

//! Middlebury `.flo`: magic float 202021.25, u32 width, u32 height, then
//! row-major `(u, v)` f32 pairs, all little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::FlowField;

pub const FLO_MAGIC: f32 = 202021.25;

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    let (h, w) = flow.dims();
    let (w32, h32) = (u32::try_from(w), u32::try_from(h));
    let (Ok(w32), Ok(h32)) = (w32, h32) else {
        return Err(Error::Encode(format!("{w}x{h} does not fit a .flo header")));
    };
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&w32.to_le_bytes());
    out.extend_from_slice(&h32.to_le_bytes());
    for [u, v] in flow.vectors() {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().expect("4-byte slice") };
    if bytes.len() < 12 {
        return Err(Error::Format(format!(".flo header truncated at {} bytes", bytes.len())));
    }
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic}")));
    }
    let w = u32::from_le_bytes(word(4)) as usize;
    let h = u32::from_le_bytes(word(8)) as usize;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Format(format!(".flo dimensions {w}x{h} overflow")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".flo of {w}x{h} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let vectors = bytes[12..]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[0..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..8].try_into().expect("4 bytes")),
            ]
        })
        .collect();
    FlowField::from_vectors(h, w, vectors).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    write_atomic(path, &encode_flo(flow)?)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

//! On-disk label-map cache.
//!
//! File layout: the 8-byte magic `SLICMAP1`, then height, width and
//! segment count as little-endian `u32`, then a zlib stream holding the
//! row-major labels as little-endian `u32`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use sha2::{Digest, Sha256};

use super::{SegmentationMap, SegmentationStack, SlicParams};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::Image;

pub const LABEL_MAP_MAGIC: &[u8; 8] = b"SLICMAP1";

pub fn encode_label_map(map: &SegmentationMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + map.labels().len());
    out.extend_from_slice(LABEL_MAP_MAGIC);
    for v in [map.height(), map.width(), map.n_segments()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut enc = ZlibEncoder::new(out, Compression::fast());
    let mut raw = Vec::with_capacity(map.labels().len() * 4);
    for l in map.labels() {
        raw.extend_from_slice(&l.to_le_bytes());
    }
    // writing into a Vec cannot fail
    enc.write_all(&raw).expect("in-memory zlib write");
    enc.finish().expect("in-memory zlib finish")
}

pub fn decode_label_map(bytes: &[u8]) -> Result<SegmentationMap> {
    if bytes.len() < 20 || &bytes[..8] != LABEL_MAP_MAGIC {
        return Err(Error::Format("not a SLICMAP1 label map".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, n) = (word(0), word(1), word(2));
    let expected = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(4))
        .ok_or_else(|| Error::Format("label map dimensions overflow".into()))?;
    let mut raw = Vec::with_capacity(expected);
    ZlibDecoder::new(&bytes[20..])
        .take(expected as u64 + 1)
        .read_to_end(&mut raw)
        .map_err(|e| Error::Format(format!("corrupt label payload: {e}")))?;
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "label payload holds {} bytes, expected {expected}",
            raw.len()
        )));
    }
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SegmentationMap::new(h, w, labels, n).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_label_map(map: &SegmentationMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_label_map(map))
}

pub fn read_label_map(path: &Path) -> Result<SegmentationMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_label_map(&bytes)
}

/// Segmentation stacks keyed by image content; backed by a directory of
/// label-map files when one is configured.
#[derive(Debug, Clone, Default)]
pub struct SegmentationCache {
    dir: Option<PathBuf>,
}

impl SegmentationCache {
    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
        }
    }

    fn key(img: &Image, n: usize, params: &SlicParams) -> String {
        let mut hasher = Sha256::new();
        hasher.update((img.height() as u64).to_le_bytes());
        hasher.update((img.width() as u64).to_le_bytes());
        hasher.update((img.channels() as u64).to_le_bytes());
        for v in img.data() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.update((n as u64).to_le_bytes());
        hasher.update(params.compactness.to_bits().to_le_bytes());
        hasher.update((params.iterations as u64).to_le_bytes());
        hasher
            .finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Loads each granularity from disk when present, otherwise computes it
    /// and stores it.
    pub fn stack(
        &self,
        img: &Image,
        component_counts: &[usize],
        params: &SlicParams,
    ) -> Result<SegmentationStack> {
        let mut maps = Vec::with_capacity(component_counts.len());
        for &n in component_counts {
            let path = self
                .dir
                .as_ref()
                .map(|d| d.join(format!("{}.slic", Self::key(img, n, params))));
            let cached = match &path {
                Some(p) if p.exists() => match read_label_map(p) {
                    Ok(m) if (m.height(), m.width()) == img.dims() => Some(m),
                    Ok(_) | Err(_) => {
                        log::warn!("ignoring unusable cache entry {}", p.display());
                        None
                    }
                },
                _ => None,
            };
            let map = match cached {
                Some(m) => m,
                None => {
                    let m = super::slic_segment(img, n, params.compactness, params.iterations)?;
                    if let Some(p) = &path {
                        write_label_map(&m, p)?;
                    }
                    m
                }
            };
            maps.push(map);
        }
        SegmentationStack::new(maps, component_counts.to_vec())
    }
}

//! KITTI flow PNG: 16-bit RGB, `u` and `v` stored as `v * 64 + 2^15`, the
//! third channel a validity flag.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use super::png::{decode_file, encode_png};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::{dim_mismatch, FlowField, Mask};

/// Largest encodable magnitude per component, exclusive.
pub const KITTI_MAX_FLOW: f32 = 512.0;

// f64 so the product near 2^15 does not lose the sub-quantum bits
fn encode_component(v: f32) -> u16 {
    (f64::from(v) * 64.0 + 32768.0).round().min(65535.0) as u16
}

/// Invalid pixels are stored as zero flow with flag 0 and are not range
/// checked.
pub fn encode_kitti_png(flow: &FlowField, valid: &Mask) -> Result<Vec<u8>> {
    let (h, w) = flow.dims();
    if valid.dims() != (h, w) {
        return Err(dim_mismatch("validity mask", (h, w), valid.dims()));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for (i, &[u, v]) in flow.vectors().iter().enumerate() {
        if valid.data()[i] >= 0.5 {
            if !(u.abs() < KITTI_MAX_FLOW && v.abs() < KITTI_MAX_FLOW) {
                return Err(Error::Encode(format!(
                    "flow ({u}, {v}) at pixel ({}, {}) is outside the KITTI range",
                    i % w,
                    i / w
                )));
            }
            data.extend_from_slice(&[encode_component(u), encode_component(v), 1]);
        } else {
            data.extend_from_slice(&[32768, 32768, 0]);
        }
    }
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
    encode_png(DynamicImage::ImageRgb16(buf))
}

pub fn write_kitti_png(flow: &FlowField, valid: &Mask, path: &Path) -> Result<()> {
    write_atomic(path, &encode_kitti_png(flow, valid)?)
}

/// Decodes flow and validity; invalid pixels carry zero flow.
pub fn read_kitti_png(path: &Path) -> Result<(FlowField, Mask)> {
    let DynamicImage::ImageRgb16(buf) = decode_file(path)? else {
        return Err(Error::Format(format!(
            "{} is not a 16-bit RGB PNG",
            path.display()
        )));
    };
    let (w, h) = buf.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut vectors = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    for px in buf.pixels() {
        let [u, v, ok] = px.0;
        if ok > 0 {
            vectors.push([
                (f32::from(u) - 32768.0) / 64.0,
                (f32::from(v) - 32768.0) / 64.0,
            ]);
            alpha.push(1.0);
        } else {
            vectors.push([0.0, 0.0]);
            alpha.push(0.0);
        }
    }
    Ok((FlowField::from_vectors(h, w, vectors)?, Mask::from_data(h, w, alpha)?))
}

//! 8-bit PNG frames and masks.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::{Image, Mask};

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub(crate) fn decode_file(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::codec(path, e))
}

pub fn encode_image_png(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = img.dims();
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let dynamic = if img.channels() == 3 {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size"))
    } else {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size"))
    };
    encode_png(dynamic)
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    let bytes: Vec<u8> = mask.data().iter().map(|&v| to_u8(v)).collect();
    encode_png(DynamicImage::ImageLuma8(
        GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size"),
    ))
}

pub fn write_image_png(img: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_image_png(img)?)
}

pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    write_atomic(path, &encode_mask_png(mask)?)
}

/// Converts a decoded raster to an RGB image with intensities in `[0, 1]`.
pub fn image_from_dynamic(img: &DynamicImage) -> Result<Image> {
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Image::from_data(h as usize, w as usize, 3, rgb.into_raw())
}

/// Reads any supported raster as RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    image_from_dynamic(&decode_file(path)?)
}

/// Reads an 8-bit grayscale PNG as a matte in `[0, 1]`.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let gray = decode_file(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let alpha = gray.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Mask::from_data(h as usize, w as usize, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::procedural_image;

    #[test]
    fn frames_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let img = procedural_image(9, 13, 2).unwrap();
        write_image_png(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.dims(), (9, 13));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        write_image_png(&back, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), back);
    }

    #[test]
    fn masks_round_trip_exactly_when_binary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Mask::from_fn(6, 5, |x, y| ((x + y) % 2) as f32).unwrap();
        write_mask_png(&mask, &path).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    #[test]
    fn grayscale_frames_load_as_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let img = Image::from_fn(3, 4, 1, |x, _, _| x as f32 / 3.0).unwrap();
        write_image_png(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.get(3, 1, 2), 1.0);
    }

    #[test]
    fn garbage_is_a_codec_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(matches!(err, Error::Codec { .. }) && !err.is_io());
    }
}

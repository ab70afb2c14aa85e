//! Raster containers, coordinate grids, bilinear resampling and alpha
//! compositing.
//!
//! Pixel coordinates are `(x, y)` = (column, row) with the origin at the
//! center of the top-left pixel. Intensities are stored as `f32` in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// How samples that fall outside the source raster are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BorderPolicy {
    /// Replicate the nearest edge pixel.
    #[default]
    ClampToEdge,
    /// Taps outside the raster read as zero.
    ZeroFill,
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimension(format!(
            "raster must be at least 1x1, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Dense `height x width x channels` raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// All-zero image.
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        check_dims(height, width)?;
        check_channels(channels)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidParameter(format!(
                "fill value {value} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        })
    }

    /// Wraps existing intensities. Every value must be finite and in `[0, 1]`.
    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        check_channels(channels)?;
        if data.len() != height * width * channels {
            return Err(Error::InvalidDimension(format!(
                "expected {} values for {width}x{height}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds from a closure returning the intensity of `(x, y, channel)`;
    /// results are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_dims(height, width)?;
        check_channels(channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(x, y, c)));
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub(crate) fn from_raw_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Sets one intensity, clamped to `[0, 1]`.
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = clamp01(v);
    }

    /// Per-channel mean over all pixels.
    pub fn mean_color(&self) -> Vec<f32> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += f64::from(*v);
            }
        }
        let n = (self.height * self.width) as f64;
        sums.into_iter().map(|s| (s / n) as f32).collect()
    }

    /// Expands a single-channel image to three channels; three-channel
    /// images are returned unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image::from_raw_unchecked(self.height, self.width, 3, data)
    }

    /// Copies the `w x h` window starting at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        check_window(self.height, self.width, x0, y0, w, h)?;
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image::from_raw_unchecked(h, w, c, data))
    }
}

fn check_channels(channels: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidDimension(format!(
            "images carry 1 or 3 channels, got {channels}"
        )));
    }
    Ok(())
}

pub(crate) fn check_window(
    height: usize,
    width: usize,
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> Result<()> {
    if w == 0 || h == 0 || x0 + w > width || y0 + h > height {
        return Err(Error::InvalidParameter(format!(
            "window {w}x{h} at ({x0}, {y0}) does not fit a {width}x{height} raster"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Soft matte with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    alpha: Vec<f32>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            alpha: vec![clamp01(value); height * width],
        })
    }

    pub fn from_data(height: usize, width: usize, alpha: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if alpha.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "expected {} mask values, got {}",
                height * width,
                alpha.len()
            )));
        }
        if let Some(bad) = alpha.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("alpha {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            alpha,
        })
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        Self::from_data(
            height,
            width,
            bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        check_dims(height, width)?;
        let mut alpha = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                alpha.push(clamp01(f(x, y)));
            }
        }
        Ok(Self {
            height,
            width,
            alpha,
        })
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, alpha: Vec<f32>) -> Self {
        debug_assert_eq!(alpha.len(), height * width);
        Self {
            height,
            width,
            alpha,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.alpha
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.alpha
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.alpha[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.alpha[y * self.width + x] = clamp01(v);
    }

    /// Binary view thresholded at 0.5.
    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.alpha[y * self.width + x] >= 0.5
    }

    pub fn binary(&self) -> Vec<bool> {
        self.alpha.iter().map(|&a| a >= 0.5).collect()
    }

    /// Number of pixels in the binary view.
    pub fn count_set(&self) -> usize {
        self.alpha.iter().filter(|&&a| a >= 0.5).count()
    }

    /// Mask whose binary view is the union of both binary views.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(dim_mismatch("mask union", self.dims(), other.dims()));
        }
        let alpha = self
            .alpha
            .iter()
            .zip(&other.alpha)
            .map(|(&a, &b)| a.max(b))
            .collect();
        Ok(Mask::from_raw_unchecked(self.height, self.width, alpha))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Mask> {
        check_window(self.height, self.width, x0, y0, w, h)?;
        let mut alpha = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let s = y * self.width + x0;
            alpha.extend_from_slice(&self.alpha[s..s + w]);
        }
        Ok(Mask::from_raw_unchecked(h, w, alpha))
    }
}

/// Dense per-pixel displacement, frame 0 to frame 1: for a non-occluded
/// pixel `x`, `frame0(x)` corresponds to `frame1(x + flow(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::constant(height, width, [0.0, 0.0])
    }

    pub fn constant(height: usize, width: usize, v: [f32; 2]) -> Result<Self> {
        check_dims(height, width)?;
        check_finite(&[v])?;
        Ok(Self {
            height,
            width,
            vectors: vec![v; height * width],
        })
    }

    pub fn from_vectors(height: usize, width: usize, vectors: Vec<[f32; 2]>) -> Result<Self> {
        check_dims(height, width)?;
        if vectors.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "expected {} flow vectors, got {}",
                height * width,
                vectors.len()
            )));
        }
        check_finite(&vectors)?;
        Ok(Self {
            height,
            width,
            vectors,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> [f32; 2],
    ) -> Result<Self> {
        check_dims(height, width)?;
        let mut vectors = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                vectors.push(f(x, y));
            }
        }
        Self::from_vectors(height, width, vectors)
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, vectors: Vec<[f32; 2]>) -> Self {
        debug_assert_eq!(vectors.len(), height * width);
        Self {
            height,
            width,
            vectors,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn into_vectors(self) -> Vec<[f32; 2]> {
        self.vectors
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [[f32; 2]] {
        &mut self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f32; 2]) {
        self.vectors[y * self.width + x] = v;
    }

    pub fn max_magnitude(&self) -> f32 {
        self.vectors
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f32::max)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FlowField> {
        check_window(self.height, self.width, x0, y0, w, h)?;
        let mut vectors = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let s = y * self.width + x0;
            vectors.extend_from_slice(&self.vectors[s..s + w]);
        }
        Ok(FlowField::from_raw_unchecked(h, w, vectors))
    }
}

fn check_finite(vectors: &[[f32; 2]]) -> Result<()> {
    if let Some(v) = vectors.iter().find(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite flow vector ({}, {})",
            v[0], v[1]
        )));
    }
    Ok(())
}

/// Per-pixel sampling locations, possibly fractional or out of bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn from_coords(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        check_dims(height, width)?;
        if coords.len() != height * width {
            return Err(Error::InvalidDimension(format!(
                "expected {} coordinates, got {}",
                height * width,
                coords.len()
            )));
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Result<Self> {
        check_dims(height, width)?;
        let mut coords = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                coords.push(f(x, y));
            }
        }
        Ok(Self {
            height,
            width,
            coords,
        })
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Self {
        Self {
            height,
            width,
            coords,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.coords[y * self.width + x]
    }

    /// Adds a constant offset to every coordinate.
    pub fn shifted(mut self, dx: f64, dy: f64) -> Self {
        for c in &mut self.coords {
            c[0] += dx;
            c[1] += dy;
        }
        self
    }
}

/// The regular pixel grid: `coords(x, y) = (x, y)`.
pub fn make_identity_grid(height: usize, width: usize) -> Result<CoordGrid> {
    check_dims(height, width)?;
    let mut coords = vec![[0.0; 2]; height * width];
    par::for_each_row_mut(&mut coords, width, |y, row| {
        for (x, c) in row.iter_mut().enumerate() {
            *c = [x as f64, y as f64];
        }
    });
    Ok(CoordGrid::from_raw_unchecked(height, width, coords))
}

/// `floor` without a libm call on targets lacking SSE4.1. Values beyond
/// the `i64` range saturate, which only matters far outside any raster.
#[inline(always)]
fn fast_floor(v: f64) -> f64 {
    let t = v as i64 as f64;
    if t > v {
        t - 1.0
    } else {
        t
    }
}

/// Bilinear taps of a `width x height` raster at `(x, y)`. Indices are
/// pixel offsets; taps outside a zero-filled raster get weight 0.
#[inline]
pub(crate) fn bilinear_taps(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
    border: BorderPolicy,
) -> [(usize, f32); 4] {
    match border {
        BorderPolicy::ClampToEdge => {
            if x >= 0.0 && y >= 0.0 && x < (width - 1) as f64 && y < (height - 1) as f64 {
                let (x0, y0) = (x as usize, y as usize);
                let fx = (x - x0 as f64) as f32;
                let fy = (y - y0 as f64) as f32;
                let i = y0 * width + x0;
                return [
                    (i, (1.0 - fx) * (1.0 - fy)),
                    (i + 1, fx * (1.0 - fy)),
                    (i + width, (1.0 - fx) * fy),
                    (i + width + 1, fx * fy),
                ];
            }
            let xc = x.clamp(0.0, (width - 1) as f64);
            let yc = y.clamp(0.0, (height - 1) as f64);
            // non-negative here, so truncation is floor
            let x0 = xc as usize;
            let y0 = yc as usize;
            let fx = (xc - x0 as f64) as f32;
            let fy = (yc - y0 as f64) as f32;
            let x1 = (x0 + 1).min(width - 1);
            let y1 = (y0 + 1).min(height - 1);
            [
                (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * width + x1, fx * (1.0 - fy)),
                (y1 * width + x0, (1.0 - fx) * fy),
                (y1 * width + x1, fx * fy),
            ]
        }
        BorderPolicy::ZeroFill => {
            if !(x.is_finite() && y.is_finite()) {
                return [(0, 0.0); 4];
            }
            let xf = fast_floor(x);
            let yf = fast_floor(y);
            let fx = (x - xf) as f32;
            let fy = (y - yf) as f32;
            let (w, h) = (width as f64, height as f64);
            let tap = |tx: f64, ty: f64, wgt: f32| -> (usize, f32) {
                if tx >= 0.0 && ty >= 0.0 && tx < w && ty < h && wgt != 0.0 {
                    (ty as usize * width + tx as usize, wgt)
                } else {
                    (0, 0.0)
                }
            };
            [
                tap(xf, yf, (1.0 - fx) * (1.0 - fy)),
                tap(xf + 1.0, yf, fx * (1.0 - fy)),
                tap(xf, yf + 1.0, (1.0 - fx) * fy),
                tap(xf + 1.0, yf + 1.0, fx * fy),
            ]
        }
    }
}

/// Borrowed raster placed with its top-left pixel at `origin` in some larger
/// frame. Sampling coordinates are given in frame coordinates.
#[derive(Clone, Copy)]
pub(crate) struct RasterRef<'a> {
    pub data: &'a [f32],
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub origin: (i64, i64),
}

impl<'a> RasterRef<'a> {
    pub fn image(img: &'a Image) -> Self {
        Self {
            data: &img.data,
            width: img.width,
            height: img.height,
            channels: img.channels,
            origin: (0, 0),
        }
    }

    pub fn mask(m: &'a Mask) -> Self {
        Self {
            data: &m.alpha,
            width: m.width,
            height: m.height,
            channels: 1,
            origin: (0, 0),
        }
    }

    #[inline]
    pub fn sample_into(&self, x: f64, y: f64, border: BorderPolicy, out: &mut [f32]) {
        let taps = bilinear_taps(
            x - self.origin.0 as f64,
            y - self.origin.1 as f64,
            self.width,
            self.height,
            border,
        );
        let c = self.channels;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            let mut acc = 0.0f32;
            for &(i, w) in &taps {
                acc += w * self.data[i * c + ch];
            }
            *o = clamp01(acc);
        }
    }
}

/// Resamples `src` at `coord(x, y)` for every pixel of an `out_w x out_h`
/// raster.
pub(crate) fn resample_with<F>(
    src: RasterRef<'_>,
    out_w: usize,
    out_h: usize,
    border: BorderPolicy,
    coord: F,
) -> Vec<f32>
where
    F: Fn(usize, usize) -> [f64; 2] + Sync + Send,
{
    let c = src.channels;
    let mut out = vec![0.0f32; out_w * out_h * c];
    par::for_each_row_mut(&mut out, out_w * c, |y, row| {
        for x in 0..out_w {
            let [sx, sy] = coord(x, y);
            src.sample_into(sx, sy, border, &mut row[x * c..x * c + c]);
        }
    });
    out
}

/// Bilinear resampling of `src` at every location of `grid`.
pub fn bilinear_sample(src: &Image, grid: &CoordGrid, border: BorderPolicy) -> Result<Image> {
    check_dims(src.height, src.width)?;
    let data = resample_with(RasterRef::image(src), grid.width, grid.height, border, |x, y| {
        grid.coords[y * grid.width + x]
    });
    Ok(Image::from_raw_unchecked(
        grid.height,
        grid.width,
        src.channels,
        data,
    ))
}

/// Bilinear resampling of a soft matte; samples outside read as 0.
pub fn sample_mask(src: &Mask, grid: &CoordGrid) -> Result<Mask> {
    check_dims(src.height, src.width)?;
    let alpha = resample_with(
        RasterRef::mask(src),
        grid.width,
        grid.height,
        BorderPolicy::ZeroFill,
        |x, y| grid.coords[y * grid.width + x],
    );
    Ok(Mask::from_raw_unchecked(grid.height, grid.width, alpha))
}

/// `matte * fg + (1 - matte) * bg`, per pixel and channel.
pub fn alpha_composite(fg: &Image, matte: &Mask, bg: &Image) -> Result<Image> {
    if fg.dims() != bg.dims() || fg.dims() != matte.dims() {
        return Err(dim_mismatch("alpha_composite", fg.dims(), matte.dims()));
    }
    if fg.channels != bg.channels {
        return Err(Error::InvalidDimension(format!(
            "foreground has {} channels, background {}",
            fg.channels, bg.channels
        )));
    }
    let c = fg.channels;
    let w = fg.width;
    let mut out = bg.data.clone();
    par::for_each_row_mut(&mut out, w * c, |y, row| {
        for x in 0..w {
            let a = matte.alpha[y * w + x];
            if a == 0.0 {
                continue;
            }
            let base = (y * w + x) * c;
            for ch in 0..c {
                let f = fg.data[base + ch];
                let b = row[x * c + ch];
                row[x * c + ch] = if a == 1.0 {
                    f
                } else {
                    clamp01(a * f + (1.0 - a) * b)
                };
            }
        }
    });
    Ok(Image::from_raw_unchecked(fg.height, fg.width, c, out))
}

pub(crate) fn dim_mismatch(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::InvalidDimension(format!(
        "{what}: {}x{} does not match {}x{}",
        a.1, a.0, b.1, b.0
    ))
}

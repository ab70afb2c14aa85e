//! Flow-consistent augmentation of finished samples.
//!
//! Every geometric operation moves frames, flow, masks and depth labels
//! together and rewrites the flow vectors so ground truth stays exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color::{hsv_to_rgb, luma, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::imaging::{
    bilinear_taps, check_window, clamp01, resample_with, BorderPolicy, FlowField, Image, Mask,
    RasterRef,
};
use crate::scene::{DepthLabels, SceneSample};

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSize {
    pub height: usize,
    pub width: usize,
}

/// Maximum deviation of each jitter factor from identity. Brightness,
/// contrast and saturation factors are drawn from `[1 - r, 1 + r]`, the hue
/// shift from `[-hue, hue]` in turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterRanges {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.5 / std::f32::consts::PI,
        }
    }
}

impl JitterRanges {
    pub const NONE: JitterRanges = JitterRanges {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };
}

/// One drawn set of jitter factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl JitterDraw {
    pub const IDENTITY: JitterDraw = JitterDraw {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(ranges: &JitterRanges, rng: &mut R) -> Self {
        let mut factor = |r: f32| {
            let v = rng.random::<f32>();
            if r > 0.0 {
                let lo = (1.0 - r).max(0.0);
                lo + v * (1.0 + r - lo)
            } else {
                1.0
            }
        };
        let brightness = factor(ranges.brightness);
        let contrast = factor(ranges.contrast);
        let saturation = factor(ranges.saturation);
        let v = rng.random::<f32>();
        let hue = if ranges.hue > 0.0 {
            (2.0 * v - 1.0) * ranges.hue
        } else {
            0.0
        };
        Self {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub jitter: JitterRanges,
    pub jitter_prob: f64,
    /// Independent jitter draws for the two frames.
    pub asymmetric_jitter: bool,
    /// Scale factors are drawn log-uniformly from this interval.
    pub scale_range: [f64; 2],
    pub scale_prob: f64,
    pub h_flip_prob: f64,
    pub v_flip_prob: f64,
    /// `None` keeps the full frame. The scale factor is raised when needed
    /// so the scaled sample always contains the crop.
    pub crop_size: Option<CropSize>,
    pub erase_prob: f64,
    /// Erased area as a fraction of the frame.
    pub erase_area_range: [f64; 2],
    /// Frame-0 pixels whose match falls in the erased rectangle become
    /// occluded.
    pub erase_marks_occluded: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: JitterRanges::default(),
            jitter_prob: 1.0,
            asymmetric_jitter: true,
            scale_range: [0.87, 1.52],
            scale_prob: 0.8,
            h_flip_prob: 0.5,
            v_flip_prob: 0.1,
            crop_size: Some(CropSize {
                height: 400,
                width: 720,
            }),
            erase_prob: 0.5,
            erase_area_range: [0.01, 0.05],
            erase_marks_occluded: true,
        }
    }
}

impl AugmentConfig {
    /// Every operation switched off.
    pub fn identity() -> Self {
        Self {
            jitter: JitterRanges::NONE,
            jitter_prob: 0.0,
            asymmetric_jitter: false,
            scale_range: [1.0, 1.0],
            scale_prob: 0.0,
            h_flip_prob: 0.0,
            v_flip_prob: 0.0,
            crop_size: None,
            erase_prob: 0.0,
            erase_area_range: [0.01, 0.05],
            erase_marks_occluded: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        for (name, p) in [
            ("jitter_prob", self.jitter_prob),
            ("scale_prob", self.scale_prob),
            ("h_flip_prob", self.h_flip_prob),
            ("v_flip_prob", self.v_flip_prob),
            ("erase_prob", self.erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let j = &self.jitter;
        for (name, r) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
        ] {
            if !(r.is_finite() && r >= 0.0) {
                return bad(format!("{name} jitter must be finite and non-negative, got {r}"));
            }
        }
        if !(0.0..=0.5).contains(&j.hue) {
            return bad(format!("hue jitter must lie in [0, 0.5], got {}", j.hue));
        }
        let [lo, hi] = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("scale_range must be positive and ordered, got [{lo}, {hi}]"));
        }
        let [lo, hi] = self.erase_area_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("erase_area_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        if let Some(c) = self.crop_size {
            if c.width == 0 || c.height == 0 {
                return bad("crop_size must be at least 1x1".into());
            }
        }
        Ok(())
    }
}

/// What `augment` applied, stored in the sample provenance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub jitter: Option<[JitterDraw; 2]>,
    pub scale: Option<f64>,
    pub h_flip: bool,
    pub v_flip: bool,
    pub crop: Option<Region>,
    pub erase: Option<Region>,
}

/// Per-frame photometric jitter; geometry and ground truth are untouched.
pub fn color_jitter(mut sample: SceneSample, draws: [JitterDraw; 2]) -> SceneSample {
    sample.frame0 = jitter_image(sample.frame0, &draws[0]);
    sample.frame1 = jitter_image(sample.frame1, &draws[1]);
    sample
}

fn jitter_image(img: Image, d: &JitterDraw) -> Image {
    if *d == JitterDraw::IDENTITY {
        return img;
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = img.into_data();
    if d.brightness != 1.0 {
        data.iter_mut().for_each(|v| *v = clamp01(*v * d.brightness));
    }
    let gray = |px: &[f32]| if c == 3 { luma([px[0], px[1], px[2]]) } else { px[0] };
    if d.contrast != 1.0 {
        let mean = data.chunks_exact(c).map(|p| f64::from(gray(p))).sum::<f64>() / (h * w) as f64;
        let mean = mean as f32;
        data.iter_mut()
            .for_each(|v| *v = clamp01(d.contrast * *v + (1.0 - d.contrast) * mean));
    }
    if c == 3 && d.saturation != 1.0 {
        for px in data.chunks_exact_mut(3) {
            let g = gray(px);
            for v in px.iter_mut() {
                *v = clamp01(d.saturation * *v + (1.0 - d.saturation) * g);
            }
        }
    }
    if c == 3 && d.hue != 0.0 {
        for px in data.chunks_exact_mut(3) {
            let [hh, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
            let rgb = hsv_to_rgb([(hh + d.hue).rem_euclid(1.0), s, v]);
            for (o, v) in px.iter_mut().zip(rgb) {
                *o = clamp01(v);
            }
        }
    }
    Image::from_raw_unchecked(h, w, c, data)
}

/// Gathers `out[y][x] = src[rows[y]][cols[x]]` for an interleaved raster.
fn gather<T: Copy>(src: &[T], width: usize, channels: usize, cols: &[usize], rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(cols.len() * rows.len() * channels);
    for &sy in rows {
        let row = &src[sy * width * channels..(sy + 1) * width * channels];
        for &sx in cols {
            out.extend_from_slice(&row[sx * channels..(sx + 1) * channels]);
        }
    }
    out
}

/// Applies the same index gather to every raster of the sample.
fn gather_sample(s: &SceneSample, cols: &[usize], rows: &[usize], frames: bool) -> SceneSample {
    let (_, w) = s.dims();
    let (nh, nw) = (rows.len(), cols.len());
    let img = |im: &Image| {
        Image::from_raw_unchecked(nh, nw, im.channels(), gather(im.data(), w, im.channels(), cols, rows))
    };
    let mask = |m: &Mask| Mask::from_raw_unchecked(nh, nw, gather(m.data(), w, 1, cols, rows));
    SceneSample {
        frame0: if frames { img(&s.frame0) } else { s.frame0.clone() },
        frame1: if frames { img(&s.frame1) } else { s.frame1.clone() },
        flow: FlowField::from_raw_unchecked(nh, nw, gather(s.flow.vectors(), w, 1, cols, rows)),
        occlusion: mask(&s.occlusion),
        shadow_region: mask(&s.shadow_region),
        depth: DepthLabels {
            frame0: gather(&s.depth.frame0, w, 1, cols, rows),
            frame1: gather(&s.depth.frame1, w, 1, cols, rows),
        },
        provenance: s.provenance.clone(),
    }
}

/// Output size of scaling an `n`-pixel axis by `factor`.
fn scaled_len(n: usize, factor: f64) -> usize {
    (n as f64 * factor).round().max(0.0) as usize
}

/// Resamples both frames (bilinear) and the ground truth (nearest) by
/// `factor`, center-aligned. Flow vectors are multiplied by the realized
/// per-axis ratio so they match the resampled frames exactly.
pub fn scale(sample: SceneSample, factor: f64) -> Result<SceneSample> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidParameter(format!("scale factor must be positive, got {factor}")));
    }
    let (h, w) = sample.dims();
    let (nh, nw) = (scaled_len(h, factor), scaled_len(w, factor));
    if nh < 1 || nw < 1 {
        return Err(Error::InvalidParameter(format!(
            "scaling {w}x{h} by {factor} leaves {nw}x{nh}"
        )));
    }
    resize(sample, nh, nw)
}

/// [`scale`] to an exact output size, with independent ratios per axis.
/// Resizing back to the original size inverts a previous scale.
pub fn resize(sample: SceneSample, nh: usize, nw: usize) -> Result<SceneSample> {
    if nh < 1 || nw < 1 {
        return Err(Error::InvalidParameter(format!("cannot resize to {nw}x{nh}")));
    }
    let (h, w) = sample.dims();
    if (nh, nw) == (h, w) {
        return Ok(sample);
    }
    let (rx, ry) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let src_x = move |x: usize| (x as f64 + 0.5) / rx - 0.5;
    let src_y = move |y: usize| (y as f64 + 0.5) / ry - 0.5;
    let nearest = |v: f64, n: usize| ((v + 0.5).floor().max(0.0) as usize).min(n - 1);
    let cols: Vec<usize> = (0..nw).map(|x| nearest(src_x(x), w)).collect();
    let rows: Vec<usize> = (0..nh).map(|y| nearest(src_y(y), h)).collect();

    let mut out = gather_sample(&sample, &cols, &rows, false);
    let frame = |im: &Image| {
        let data = resample_with(RasterRef::image(im), nw, nh, BorderPolicy::ClampToEdge, |x, y| {
            [src_x(x), src_y(y)]
        });
        Image::from_raw_unchecked(nh, nw, im.channels(), data)
    };
    out.frame0 = frame(&sample.frame0);
    out.frame1 = frame(&sample.frame1);
    let (fx, fy) = (rx as f32, ry as f32);
    for v in out.flow.vectors_mut() {
        *v = [v[0] * fx, v[1] * fy];
    }
    Ok(out)
}

/// Mirrors every raster; the matching flow component changes sign.
pub fn flip(sample: SceneSample, horizontal: bool, vertical: bool) -> SceneSample {
    if !horizontal && !vertical {
        return sample;
    }
    let (h, w) = sample.dims();
    let cols: Vec<usize> = if horizontal { (0..w).rev().collect() } else { (0..w).collect() };
    let rows: Vec<usize> = if vertical { (0..h).rev().collect() } else { (0..h).collect() };
    let mut out = gather_sample(&sample, &cols, &rows, true);
    for v in out.flow.vectors_mut() {
        if horizontal {
            v[0] = -v[0];
        }
        if vertical {
            v[1] = -v[1];
        }
    }
    out
}

/// Cuts the window `(x, y, width, height)` out of every raster. Pixels whose
/// match leaves the window become occluded.
pub fn crop(sample: SceneSample, window: Region) -> Result<SceneSample> {
    let (h, w) = sample.dims();
    check_window(h, w, window.x, window.y, window.width, window.height)?;
    if (window.x, window.y, window.width, window.height) == (0, 0, w, h) {
        return Ok(sample);
    }
    let cols: Vec<usize> = (window.x..window.x + window.width).collect();
    let rows: Vec<usize> = (window.y..window.y + window.height).collect();
    let mut out = gather_sample(&sample, &cols, &rows, true);
    let (cw, ch) = ((window.width - 1) as f64, (window.height - 1) as f64);
    let flow = out.flow.vectors().to_vec();
    for (i, occ) in out.occlusion.data_mut().iter_mut().enumerate() {
        let (x, y) = (i % window.width, i / window.width);
        let tx = x as f64 + f64::from(flow[i][0]);
        let ty = y as f64 + f64::from(flow[i][1]);
        if !(tx >= 0.0 && tx <= cw && ty >= 0.0 && ty <= ch) {
            *occ = 1.0;
        }
    }
    Ok(out)
}

/// Fills `rect` of frame 1 with the frame-1 mean color. With
/// `mark_occluded`, frame-0 pixels whose in-frame bilinear match touches
/// the rectangle become occluded.
pub fn erase(mut sample: SceneSample, rect: Region, mark_occluded: bool) -> Result<SceneSample> {
    if rect.is_empty() {
        return Ok(sample);
    }
    let (h, w) = sample.dims();
    check_window(h, w, rect.x, rect.y, rect.width, rect.height)?;
    let mean = sample.frame1.mean_color();
    let c = sample.frame1.channels();
    let data = sample.frame1.data_mut();
    for y in rect.y..rect.y + rect.height {
        for x in rect.x..rect.x + rect.width {
            data[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&mean);
        }
    }
    if mark_occluded {
        let flow = sample.flow.vectors().to_vec();
        for (i, occ) in sample.occlusion.data_mut().iter_mut().enumerate() {
            let (x, y) = (i % w, i / w);
            let tx = x as f64 + f64::from(flow[i][0]);
            let ty = y as f64 + f64::from(flow[i][1]);
            if !(tx >= 0.0 && tx <= (w - 1) as f64 && ty >= 0.0 && ty <= (h - 1) as f64) {
                continue;
            }
            let taps = bilinear_taps(tx, ty, w, h, BorderPolicy::ZeroFill);
            if taps.iter().any(|&(j, wgt)| wgt > 0.0 && rect.contains(j % w, j / w)) {
                *occ = 1.0;
            }
        }
    }
    Ok(sample)
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

fn draw_erase_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, area: [f64; 2]) -> Region {
    let a = area[0] + rng.random::<f64>() * (area[1] - area[0]);
    let aspect = log_uniform(rng, [0.5, 2.0]);
    let px = a * (h * w) as f64;
    let rw = ((px * aspect).sqrt().round() as usize).clamp(1, w);
    let rh = ((px / aspect).sqrt().round() as usize).clamp(1, h);
    Region {
        x: rng.random_range(0..=w - rw),
        y: rng.random_range(0..=h - rh),
        width: rw,
        height: rh,
    }
}

/// Applies jitter, scale, flips, crop and erase in that order, each gated by
/// its probability. The number of random draws does not depend on which
/// gates fire.
pub fn augment<R: Rng + ?Sized>(sample: SceneSample, config: &AugmentConfig, rng: &mut R) -> Result<SceneSample> {
    config.validate()?;
    let mut record = AugmentRecord::default();

    let jitter_on = rng.random::<f64>() < config.jitter_prob;
    let d0 = JitterDraw::sample(&config.jitter, rng);
    let d1 = JitterDraw::sample(&config.jitter, rng);
    let d1 = if config.asymmetric_jitter { d1 } else { d0 };
    let mut sample = if jitter_on {
        record.jitter = Some([d0, d1]);
        color_jitter(sample, [d0, d1])
    } else {
        sample
    };

    let scale_on = rng.random::<f64>() < config.scale_prob;
    let drawn = log_uniform(rng, config.scale_range);
    let mut factor = if scale_on { drawn } else { 1.0 };
    if let Some(c) = config.crop_size {
        let (h, w) = sample.dims();
        let need = (c.height as f64 / h as f64).max(c.width as f64 / w as f64);
        if factor < need {
            factor = need;
        }
        // rounding must not leave the scaled sample a pixel short
        while scaled_len(h, factor) < c.height || scaled_len(w, factor) < c.width {
            factor *= 1.0 + 1e-9;
            factor = factor.max(need + f64::EPSILON);
        }
    }
    if factor != 1.0 {
        sample = scale(sample, factor)?;
        record.scale = Some(factor);
    }

    record.h_flip = rng.random::<f64>() < config.h_flip_prob;
    record.v_flip = rng.random::<f64>() < config.v_flip_prob;
    sample = flip(sample, record.h_flip, record.v_flip);

    let (h, w) = sample.dims();
    let (cx, cy) = (rng.random::<f64>(), rng.random::<f64>());
    if let Some(c) = config.crop_size {
        let window = Region {
            x: (cx * (w - c.width + 1) as f64) as usize,
            y: (cy * (h - c.height + 1) as f64) as usize,
            width: c.width,
            height: c.height,
        };
        sample = crop(sample, window)?;
        record.crop = Some(window);
    }

    let (h, w) = sample.dims();
    let erase_on = rng.random::<f64>() < config.erase_prob;
    let rect = draw_erase_rect(rng, h, w, config.erase_area_range);
    if erase_on {
        sample = erase(sample, rect, config.erase_marks_occluded)?;
        record.erase = Some(rect);
    }

    sample.provenance.augmentation = Some(record);
    Ok(sample)
}

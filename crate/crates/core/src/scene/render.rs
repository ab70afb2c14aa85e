//! Foreground layer rasters.
//!
//! A layer only covers a small part of the frame, so its two warped copies
//! are rendered into rectangles instead of full frames. The rectangles are
//! found by evaluating the warp on a coarse lattice and keeping every
//! lattice block whose mapped footprint can reach the sampled raster.

use super::LayerSpec;
use crate::error::{Error, Result};
use crate::imaging::{bilinear_taps, clamp01, BorderPolicy, FlowField, Image, Mask, RasterRef};
use crate::par;
use crate::tps::TpsWarp;

/// Axis-aligned pixel rectangle, possibly extending past the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: i64, y0: i64, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    pub fn frame(height: usize, width: usize) -> Self {
        Self::new(0, 0, width, height)
    }

    pub fn x1(&self) -> i64 {
        self.x0 + self.w as i64
    }

    pub fn y1(&self) -> i64 {
        self.y0 + self.h as i64
    }

    pub fn is_empty(&self) -> bool {
        self.w == 0 || self.h == 0
    }

    pub fn intersect(&self, o: &Rect) -> Rect {
        let x0 = self.x0.max(o.x0);
        let y0 = self.y0.max(o.y0);
        let x1 = self.x1().min(o.x1());
        let y1 = self.y1().min(o.y1());
        if x1 <= x0 || y1 <= y0 {
            Rect::new(x0, y0, 0, 0)
        } else {
            Rect::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize)
        }
    }

    pub fn union(&self, o: &Rect) -> Rect {
        if self.is_empty() {
            return *o;
        }
        if o.is_empty() {
            return *self;
        }
        let x0 = self.x0.min(o.x0);
        let y0 = self.y0.min(o.y0);
        let x1 = self.x1().max(o.x1());
        let y1 = self.y1().max(o.y1());
        Rect::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize)
    }
}

/// Premultiplied color and coverage of one layer over `rect`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRaster {
    pub rect: Rect,
    pub channels: usize,
    pub color: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl LayerRaster {
    fn empty(channels: usize) -> Self {
        Self {
            rect: Rect::new(0, 0, 0, 0),
            channels,
            color: Vec::new(),
            alpha: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rect.is_empty()
    }

    fn color_ref(&self) -> RasterRef<'_> {
        RasterRef {
            data: &self.color,
            width: self.rect.w,
            height: self.rect.h,
            channels: self.channels,
            origin: (self.rect.x0, self.rect.y0),
        }
    }

    fn alpha_ref(&self) -> RasterRef<'_> {
        RasterRef {
            data: &self.alpha,
            width: self.rect.w,
            height: self.rect.h,
            channels: 1,
            origin: (self.rect.x0, self.rect.y0),
        }
    }

    /// Tight bounds of the pixels with non-zero coverage.
    pub fn support(&self) -> Option<Rect> {
        let mut b: Option<(i64, i64, i64, i64)> = None;
        for (i, &a) in self.alpha.iter().enumerate() {
            if a > 0.0 {
                let x = self.rect.x0 + (i % self.rect.w) as i64;
                let y = self.rect.y0 + (i / self.rect.w) as i64;
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
        b.map(|(x0, y0, x1, y1)| Rect::new(x0, y0, (x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize))
    }

    /// Coverage at frame pixel `(x, y)`; zero outside the raster.
    pub fn alpha_at(&self, x: i64, y: i64) -> f32 {
        let r = &self.rect;
        if x < r.x0 || y < r.y0 || x >= r.x1() || y >= r.y1() {
            return 0.0;
        }
        self.alpha[((y - r.y0) as usize) * r.w + (x - r.x0) as usize]
    }

    fn to_frame(&self, height: usize, width: usize) -> (Image, Mask) {
        let c = self.channels;
        let mut color = vec![0.0f32; height * width * c];
        let mut alpha = vec![0.0f32; height * width];
        let inside = self.rect.intersect(&Rect::frame(height, width));
        for y in inside.y0..inside.y1() {
            for x in inside.x0..inside.x1() {
                let src = ((y - self.rect.y0) as usize) * self.rect.w + (x - self.rect.x0) as usize;
                let dst = y as usize * width + x as usize;
                alpha[dst] = self.alpha[src];
                color[dst * c..dst * c + c].copy_from_slice(&self.color[src * c..src * c + c]);
            }
        }
        (
            Image::from_raw_unchecked(height, width, c, color),
            Mask::from_raw_unchecked(height, width, alpha),
        )
    }
}

/// Both warped copies of one layer plus its flow over `frame0.rect`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRender {
    pub frame0: LayerRaster,
    pub frame1: LayerRaster,
    /// `warp0(x - p0) + p1 - x` for every pixel of `frame0.rect`.
    pub flow: Vec<[f32; 2]>,
    /// Lattice stride used for the dense warp evaluation.
    pub stride: usize,
}

/// Full-frame view of a rendered layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundLayers {
    /// Premultiplied texture in frame 0, i.e. `M0 * F0`.
    pub f0: Image,
    pub f1: Image,
    pub m0: Mask,
    pub m1: Mask,
    /// Layer flow over the whole frame.
    pub flow: FlowField,
}

const BLOCK: usize = 16;
/// Allowed deviation of the warp inside a lattice block from the bounds of
/// its mapped corners, in pixels.
const BLOCK_SLACK: f64 = 4.0;

/// `warp(p + pre) + post` at the coarse lattice nodes of `region`.
fn lattice_map(
    warp: &TpsWarp,
    pre: [f64; 2],
    post: [f64; 2],
    region: Rect,
) -> (Vec<i64>, Vec<i64>, Vec<[f64; 2]>) {
    let xs = lattice(region.x0, region.w);
    let ys = lattice(region.y0, region.h);
    let fx: Vec<f64> = xs.iter().map(|&x| x as f64 + pre[0]).collect();
    let fy: Vec<f64> = ys.iter().map(|&y| y as f64 + pre[1]).collect();
    let mut nodes = warp.evaluate_lattice(&fx, &fy);
    for m in &mut nodes {
        m[0] += post[0];
        m[1] += post[1];
    }
    (xs, ys, nodes)
}

/// Bounds of `warp(p + pre) + post` over `region`, from a coarse lattice.
fn mapped_bounds(warp: &TpsWarp, pre: [f64; 2], post: [f64; 2], region: Rect) -> [f64; 4] {
    let (_, _, nodes) = lattice_map(warp, pre, post, region);
    let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
    for m in nodes {
        b = [b[0].min(m[0]), b[1].min(m[1]), b[2].max(m[0]), b[3].max(m[1])];
    }
    [b[0] - BLOCK_SLACK, b[1] - BLOCK_SLACK, b[2] + BLOCK_SLACK, b[3] + BLOCK_SLACK]
}

fn lattice(start: i64, len: usize) -> Vec<i64> {
    if len == 0 {
        return Vec::new();
    }
    let last = start + len as i64 - 1;
    let mut v: Vec<i64> = (0..)
        .map(|i| start + (i * BLOCK) as i64)
        .take_while(|&p| p < last)
        .collect();
    v.push(last);
    v
}

/// Smallest rectangle inside `region` containing every pixel `p` for which
/// `warp(p + pre) + post` can land on a bilinear tap of `target`.
fn active_rect(warp: &TpsWarp, pre: [f64; 2], post: [f64; 2], region: Rect, target: Rect) -> Rect {
    if region.is_empty() || target.is_empty() {
        return Rect::new(0, 0, 0, 0);
    }
    let (xs, ys, nodes) = lattice_map(warp, pre, post, region);
    let (tx0, ty0) = (target.x0 as f64 - 1.0, target.y0 as f64 - 1.0);
    let (tx1, ty1) = (target.x1() as f64, target.y1() as f64);
    let nx = xs.len();
    let mut out = Rect::new(0, 0, 0, 0);
    let single_x = nx == 1;
    let single_y = ys.len() == 1;
    let by_max = if single_y { 1 } else { ys.len() - 1 };
    let bx_max = if single_x { 1 } else { nx - 1 };
    for by in 0..by_max {
        for bx in 0..bx_max {
            let corners = [
                (bx, by),
                ((bx + 1).min(nx - 1), by),
                (bx, (by + 1).min(ys.len() - 1)),
                ((bx + 1).min(nx - 1), (by + 1).min(ys.len() - 1)),
            ];
            let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
            for (cx, cy) in corners {
                let m = nodes[cy * nx + cx];
                b = [b[0].min(m[0]), b[1].min(m[1]), b[2].max(m[0]), b[3].max(m[1])];
            }
            let hit = b[2] + BLOCK_SLACK > tx0
                && b[0] - BLOCK_SLACK < tx1
                && b[3] + BLOCK_SLACK > ty0
                && b[1] - BLOCK_SLACK < ty1;
            if hit {
                let x0 = xs[bx];
                let x1 = xs[(bx + 1).min(nx - 1)];
                let y0 = ys[by];
                let y1 = ys[(by + 1).min(ys.len() - 1)];
                let block = Rect::new(x0, y0, (x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
                out = out.union(&block);
            }
        }
    }
    out
}

fn bounds_rect(b: [f64; 4]) -> Rect {
    let x0 = b[0].floor() as i64 - 1;
    let y0 = b[1].floor() as i64 - 1;
    let x1 = b[2].ceil() as i64 + 2;
    let y1 = b[3].ceil() as i64 + 2;
    Rect::new(x0, y0, (x1 - x0).max(0) as usize, (y1 - y0).max(0) as usize)
}

fn mask_bounds(mask: &Mask) -> Option<Rect> {
    let w = mask.width();
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (y, row) in mask.data().chunks_exact(w).enumerate() {
        let Some(first) = row.iter().position(|&a| a > 0.0) else {
            continue;
        };
        let last = row.iter().rposition(|&a| a > 0.0).unwrap_or(first);
        b = Some(match b {
            None => (first, y, last, y),
            Some((x0, y0, x1, _)) => (x0.min(first), y0, x1.max(last), y),
        });
    }
    b.map(|(x0, y0, x1, y1)| Rect::new(x0 as i64, y0 as i64, x1 - x0 + 1, y1 - y0 + 1))
}

/// Renders a layer's texture and coverage in both frames.
///
/// With placements `p0`, `p1` and warps `warp1`, `warp0`:
/// `frame1(y) = F(warp1(y - p1))`, `frame0(x) = frame1(warp0(x - p0) + p1)`
/// and the layer flow is `warp0(x - p0) + p1 - x`, where `F = M * I` is the
/// masked source texture.
pub fn render_layer(source: &Image, spec: &LayerSpec) -> Result<LayerRender> {
    render_layer_with_stride(source, spec, 1)
}

/// [`render_layer`] with the warps evaluated on a `stride` lattice and
/// interpolated in between.
pub fn render_layer_with_stride(
    source: &Image,
    spec: &LayerSpec,
    stride: usize,
) -> Result<LayerRender> {
    let (h, w) = source.dims();
    if spec.mask.dims() != (h, w) {
        return Err(Error::InvalidDimension(
            "layer mask does not match the source image".into(),
        ));
    }
    if spec.mask.count_set() == 0 {
        return Err(Error::DegenerateLayer("layer mask is empty".into()));
    }
    let bbox = mask_bounds(&spec.mask).expect("non-empty mask has bounds");
    let c = source.channels();
    let frame = Rect::frame(h, w);
    let [p0, p1] = [spec.placement0, spec.placement1];

    // masked texture, premultiplied, cropped to the mask bounds
    let mut tex = Vec::with_capacity(bbox.w * bbox.h * c);
    let mut tex_alpha = Vec::with_capacity(bbox.w * bbox.h);
    for y in bbox.y0..bbox.y1() {
        for x in bbox.x0..bbox.x1() {
            let a = spec.mask.get(x as usize, y as usize);
            tex_alpha.push(a);
            for v in source.pixel(x as usize, y as usize) {
                tex.push(a * v);
            }
        }
    }
    let tex_color = RasterRef {
        data: &tex,
        width: bbox.w,
        height: bbox.h,
        channels: c,
        origin: (bbox.x0, bbox.y0),
    };
    let tex_cov = RasterRef {
        data: &tex_alpha,
        width: bbox.w,
        height: bbox.h,
        channels: 1,
        origin: (bbox.x0, bbox.y0),
    };

    // frame 1 must cover the frame itself and everything frame 0 reads
    let pre0 = [-p0[0], -p0[1]];
    let reach0 = bounds_rect(mapped_bounds(&spec.warp0, pre0, p1, frame));
    let region1 = frame.union(&reach0);
    let pre1 = [-p1[0], -p1[1]];
    let rect1 = active_rect(&spec.warp1, pre1, [0.0, 0.0], region1, bbox);
    let frame1 = warp_raster(&spec.warp1, pre1, rect1, stride, tex_color, tex_cov);

    let Some(support1) = frame1.support() else {
        return Ok(LayerRender {
            frame0: LayerRaster::empty(c),
            frame1,
            flow: Vec::new(),
            stride,
        });
    };
    let rect0 = active_rect(&spec.warp0, pre0, p1, frame, support1);
    let coords0 = offset_coords(&spec.warp0, rect0, pre0, p1, stride);
    let frame0 = sample_raster(&coords0, rect0, frame1.color_ref(), frame1.alpha_ref());
    let flow = coords0
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let x = (rect0.x0 + (i % rect0.w.max(1)) as i64) as f64;
            let y = (rect0.y0 + (i / rect0.w.max(1)) as i64) as f64;
            [(m[0] - x) as f32, (m[1] - y) as f32]
        })
        .collect();
    Ok(LayerRender {
        frame0,
        frame1,
        flow,
        stride,
    })
}

fn offset_coords(
    warp: &TpsWarp,
    rect: Rect,
    pre: [f64; 2],
    post: [f64; 2],
    stride: usize,
) -> Vec<[f64; 2]> {
    let mut coords = warp.evaluate_rect_strided(rect.x0, rect.y0, rect.w, rect.h, pre, stride);
    if post != [0.0, 0.0] {
        for m in &mut coords {
            m[0] += post[0];
            m[1] += post[1];
        }
    }
    coords
}

fn warp_raster(
    warp: &TpsWarp,
    pre: [f64; 2],
    rect: Rect,
    stride: usize,
    color: RasterRef<'_>,
    cov: RasterRef<'_>,
) -> LayerRaster {
    if rect.is_empty() {
        return LayerRaster::empty(color.channels);
    }
    let coords = offset_coords(warp, rect, pre, [0.0, 0.0], stride);
    sample_raster(&coords, rect, color, cov)
}

/// Bilinear zero-fill sampling of a premultiplied raster and its coverage.
///
/// Color and coverage share taps. Runs of 8 output pixels whose taps cannot
/// reach a covered source cell are skipped.
fn sample_raster(
    coords: &[[f64; 2]],
    rect: Rect,
    color: RasterRef<'_>,
    cov: RasterRef<'_>,
) -> LayerRaster {
    let c = color.channels;
    if rect.is_empty() {
        return LayerRaster::empty(c);
    }
    let occ = Occupancy::new(&cov);
    let mut color_data = vec![0.0f32; rect.w * rect.h * c];
    let mut alpha = vec![0.0f32; rect.w * rect.h];
    par::for_each_row_pair_mut(&mut color_data, rect.w * c, &mut alpha, rect.w, |y, crow, arow| {
        let coords = &coords[y * rect.w..(y + 1) * rect.w];
        for (run, chunk) in coords.chunks(RUN).enumerate() {
            let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
            for p in chunk {
                b = [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])];
            }
            if !occ.any(b) {
                continue;
            }
            for (k, p) in chunk.iter().enumerate() {
                let x = run * RUN + k;
                let taps = bilinear_taps(
                    p[0] - cov.origin.0 as f64,
                    p[1] - cov.origin.1 as f64,
                    cov.width,
                    cov.height,
                    BorderPolicy::ZeroFill,
                );
                let mut a = 0.0f32;
                for &(i, w) in &taps {
                    a += w * cov.data[i];
                }
                if a == 0.0 {
                    continue;
                }
                arow[x] = clamp01(a);
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for &(i, w) in &taps {
                        acc += w * color.data[i * c + ch];
                    }
                    crow[x * c + ch] = clamp01(acc);
                }
            }
        }
    });
    LayerRaster {
        rect,
        channels: c,
        color: color_data,
        alpha,
    }
}

const RUN: usize = 8;
const CELL: usize = 8;

/// Summed-area table over `CELL x CELL` cells of a coverage raster, counting
/// cells with any non-zero coverage.
struct Occupancy {
    origin: (f64, f64),
    cw: usize,
    ch: usize,
    sums: Vec<u32>,
}

impl Occupancy {
    fn new(cov: &RasterRef<'_>) -> Self {
        let cw = cov.width.div_ceil(CELL);
        let ch = cov.height.div_ceil(CELL);
        let mut cells = vec![false; cw * ch];
        for y in 0..cov.height {
            for x in 0..cov.width {
                if cov.data[y * cov.width + x] != 0.0 {
                    cells[(y / CELL) * cw + x / CELL] = true;
                }
            }
        }
        let mut sums = vec![0u32; (cw + 1) * (ch + 1)];
        for y in 0..ch {
            for x in 0..cw {
                sums[(y + 1) * (cw + 1) + x + 1] = cells[y * cw + x] as u32
                    + sums[y * (cw + 1) + x + 1]
                    + sums[(y + 1) * (cw + 1) + x]
                    - sums[y * (cw + 1) + x];
            }
        }
        Self {
            origin: (cov.origin.0 as f64, cov.origin.1 as f64),
            cw,
            ch,
            sums,
        }
    }

    /// True if some bilinear tap of a point in `[x0, x1] x [y0, y1]` may hit
    /// a covered cell.
    fn any(&self, b: [f64; 4]) -> bool {
        if !(b[0].is_finite() && b[1].is_finite() && b[2].is_finite() && b[3].is_finite()) {
            return false;
        }
        let cell = |v: f64, o: f64, n: usize| -> i64 {
            (((v - o) / CELL as f64).floor() as i64).clamp(-1, n as i64)
        };
        let x0 = cell(b[0] - 1.0, self.origin.0, self.cw).max(0) as usize;
        let y0 = cell(b[1] - 1.0, self.origin.1, self.ch).max(0) as usize;
        let x1 = cell(b[2] + 1.0, self.origin.0, self.cw);
        let y1 = cell(b[3] + 1.0, self.origin.1, self.ch);
        if x1 < 0 || y1 < 0 {
            return false;
        }
        let x1 = (x1 as usize).min(self.cw - 1) + 1;
        let y1 = (y1 as usize).min(self.ch - 1) + 1;
        if x0 >= x1 || y0 >= y1 {
            return false;
        }
        let s = |x: usize, y: usize| self.sums[y * (self.cw + 1) + x];
        s(x1, y1) + s(x0, y0) > s(x0, y1) + s(x1, y0)
    }
}

impl LayerRender {
    /// Expands the layer rasters to full frames; the flow is evaluated over
    /// the whole frame.
    pub fn to_full(&self, spec: &LayerSpec, height: usize, width: usize) -> ForegroundLayers {
        let (f0, m0) = self.frame0.to_frame(height, width);
        let (f1, m1) = self.frame1.to_frame(height, width);
        let coords = offset_coords(
            &spec.warp0,
            Rect::frame(height, width),
            [-spec.placement0[0], -spec.placement0[1]],
            spec.placement1,
            self.stride,
        );
        let flow = crate::tps::displacement_from_coords(&coords, 0, 0, width, [0.0, 0.0]);
        ForegroundLayers {
            f0,
            f1,
            m0,
            m1,
            flow,
        }
    }
}

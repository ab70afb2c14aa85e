//! Layered scene synthesis: inpainting, background and foreground warping,
//! depth-ordered compositing, flow and occlusion ground truth.

mod config;
mod plan;
mod render;

pub use config::SynthesisConfig;
pub use plan::{BackgroundPlan, LayerKind, LayerPlan, ScenePlan};
pub use render::{render_layer, render_layer_with_stride, ForegroundLayers, LayerRaster, LayerRender, Rect};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    dim_mismatch, resample_with, BorderPolicy, FlowField, Image, Mask, RasterRef,
};
use crate::par;
use crate::rng::{stage_rng, Stage};
use crate::segmentation::{grow_occluder, OccluderRecord, SegmentationStack};
use crate::tps::{displacement_from_coords, fit_tps, TpsWarp};

/// One foreground layer: an occluder cut from the source and its motion.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    /// Occluder region in source-image coordinates.
    pub mask: Mask,
    pub kind: LayerKind,
    /// Warp from frame 1 into the source texture.
    pub warp1: TpsWarp,
    /// Warp from frame 0 into frame 1.
    pub warp0: TpsWarp,
    /// Offset of the layer in frame 0 relative to where it was cut.
    pub placement0: [f64; 2],
    /// Offset of the layer in frame 1.
    pub placement1: [f64; 2],
    /// Higher is closer to the camera.
    pub depth_rank: i32,
}

impl LayerSpec {
    /// Layer motion `p1 - p0`.
    pub fn delta(&self) -> [f64; 2] {
        [
            self.placement1[0] - self.placement0[0],
            self.placement1[1] - self.placement0[1],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSpec {
    /// `B1(x) = I'(warp1(x))`.
    pub warp1: TpsWarp,
    /// `B0(x) = B1(warp0(x) + shift)`.
    pub warp0: TpsWarp,
    pub shift: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub frame0: Image,
    pub frame1: Image,
    pub flow: FlowField,
}

/// Topmost opaque owner per pixel; 0 is the background, `i + 1` the i-th
/// composited layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthLabels {
    pub frame0: Vec<u16>,
    pub frame1: Vec<u16>,
}

/// Parameters that reproduce a sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub plan: Option<ScenePlan>,
    pub occluders: Vec<OccluderRecord>,
    /// Occluder draws rejected as empty or full-frame.
    pub redraws: usize,
    #[serde(default)]
    pub augmentation: Option<crate::augment::AugmentRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub frame0: Image,
    pub frame1: Image,
    /// Frame 0 to frame 1.
    pub flow: FlowField,
    /// Set where a frame-0 pixel has no visible match in frame 1.
    pub occlusion: Mask,
    /// Set where a shadow darkens the pixel in either frame.
    pub shadow_region: Mask,
    pub depth: DepthLabels,
    pub provenance: Provenance,
}

impl SceneSample {
    pub fn dims(&self) -> (usize, usize) {
        self.frame0.dims()
    }
}

/// `(1 - hole) * base + hole * aux`.
pub fn inpaint_with_auxiliary(base: &Image, hole: &Mask, aux: &Image) -> Result<Image> {
    if base.dims() != hole.dims() {
        return Err(dim_mismatch("inpaint hole", base.dims(), hole.dims()));
    }
    if base.dims() != aux.dims() || base.channels() != aux.channels() {
        return Err(dim_mismatch("inpaint auxiliary", base.dims(), aux.dims()));
    }
    let c = base.channels();
    let data = base
        .data()
        .iter()
        .zip(aux.data())
        .enumerate()
        .map(|(i, (&b, &a))| {
            let m = hole.data()[i / c];
            if m == 0.0 {
                b
            } else if m == 1.0 {
                a
            } else {
                (1.0 - m) * b + m * a
            }
        })
        .collect();
    Ok(Image::from_raw_unchecked(base.height(), base.width(), c, data))
}

/// Warps the inpainted image twice into a frame pair and returns the
/// background flow `warp0(x) - x + shift`.
pub fn synthesize_background(inpainted: &Image, spec: &BackgroundSpec) -> Result<Background> {
    synthesize_background_with_stride(inpainted, spec, 1)
}

/// [`synthesize_background`] with the warps evaluated on a `stride` lattice
/// and interpolated in between.
pub fn synthesize_background_with_stride(
    inpainted: &Image,
    spec: &BackgroundSpec,
    stride: usize,
) -> Result<Background> {
    let (h, w) = inpainted.dims();
    if !(spec.shift[0].is_finite() && spec.shift[1].is_finite()) {
        return Err(Error::InvalidParameter("background shift must be finite".into()));
    }
    let c = inpainted.channels();
    let coords1 = spec.warp1.evaluate_rect_strided(0, 0, w, h, [0.0, 0.0], stride);
    let b1 = resample_with(
        RasterRef::image(inpainted),
        w,
        h,
        BorderPolicy::ClampToEdge,
        |x, y| coords1[y * w + x],
    );
    let b1 = Image::from_raw_unchecked(h, w, c, b1);
    let coords0 = spec.warp0.evaluate_rect_strided(0, 0, w, h, [0.0, 0.0], stride);
    let d = spec.shift;
    let b0 = resample_with(RasterRef::image(&b1), w, h, BorderPolicy::ClampToEdge, |x, y| {
        let p = coords0[y * w + x];
        [p[0] + d[0], p[1] + d[1]]
    });
    let b0 = Image::from_raw_unchecked(h, w, c, b0);
    let flow = displacement_from_coords(&coords0, 0, 0, w, d);
    Ok(Background {
        frame0: b0,
        frame1: b1,
        flow,
    })
}

/// Both warped copies of a layer at its cut position, with the layer's own
/// flow `warp0(x) - x`. Placement is ignored.
pub fn synthesize_foreground(source: &Image, layer: &LayerSpec) -> Result<ForegroundLayers> {
    let unplaced = LayerSpec {
        placement0: [0.0, 0.0],
        placement1: [0.0, 0.0],
        ..layer.clone()
    };
    let (h, w) = source.dims();
    Ok(render_layer(source, &unplaced)?.to_full(&unplaced, h, w))
}

/// Composites rendered layers over the background in ascending depth order.
pub fn composite_scene(bg: &Background, layers: &[(LayerSpec, LayerRender)]) -> Result<SceneSample> {
    composite_owned(bg.clone(), layers)
}

fn composite_owned(bg: Background, layers: &[(LayerSpec, LayerRender)]) -> Result<SceneSample> {
    let (h, w) = bg.frame0.dims();
    if bg.frame1.dims() != (h, w) || bg.flow.dims() != (h, w) {
        return Err(dim_mismatch("background", (h, w), bg.frame1.dims()));
    }
    if layers.windows(2).any(|p| p[0].0.depth_rank > p[1].0.depth_rank) {
        return Err(Error::InvalidParameter(
            "layers must be sorted by ascending depth rank".into(),
        ));
    }
    if layers.len() >= u16::MAX as usize {
        return Err(Error::InvalidParameter(format!("{} layers is too many", layers.len())));
    }
    let c = bg.frame0.channels();
    let mut f0 = bg.frame0.into_data();
    let mut f1 = bg.frame1.into_data();
    let mut flow = bg.flow.into_vectors();
    let mut l0 = vec![0u16; h * w];
    let mut l1 = vec![0u16; h * w];
    // shadow strength per frame; an opaque layer on top hides the shadow below
    let mut s0 = vec![0.0f32; h * w];
    let mut s1 = vec![0.0f32; h * w];
    let frame = Rect::frame(h, w);

    for (i, (spec, render)) in layers.iter().enumerate() {
        if render.frame0.channels != c || render.frame1.channels != c {
            return Err(Error::InvalidDimension(
                "layer and background channel counts differ".into(),
            ));
        }
        let id = (i + 1) as u16;
        let passes = [
            (&render.frame0, &mut f0, &mut s0, &mut l0),
            (&render.frame1, &mut f1, &mut s1, &mut l1),
        ];
        for (fi, (raster, img, shade, labels)) in passes.into_iter().enumerate() {
            let r = raster.rect.intersect(&frame);
            for y in r.y0..r.y1() {
                for x in r.x0..r.x1() {
                    let src = ((y - raster.rect.y0) as usize) * raster.rect.w
                        + (x - raster.rect.x0) as usize;
                    let a = raster.alpha[src];
                    if a == 0.0 {
                        continue;
                    }
                    let dst = y as usize * w + x as usize;
                    let px = &mut img[dst * c..dst * c + c];
                    match spec.kind {
                        LayerKind::Opaque => {
                            let col = &raster.color[src * c..src * c + c];
                            for (p, &v) in px.iter_mut().zip(col) {
                                *p = if a == 1.0 { v } else { (v + (1.0 - a) * *p).clamp(0.0, 1.0) };
                            }
                            shade[dst] *= 1.0 - a;
                            if a >= 0.5 {
                                labels[dst] = id;
                                if fi == 0 {
                                    flow[dst] = render.flow[src];
                                }
                            }
                        }
                        LayerKind::Shadow { opacity } => {
                            let k = opacity as f32 * a;
                            for p in px.iter_mut() {
                                *p *= 1.0 - k;
                            }
                            shade[dst] = 1.0 - (1.0 - shade[dst]) * (1.0 - k);
                        }
                    }
                }
            }
        }
    }

    let (occlusion, shadow_region) = occlusion_and_shadow(h, w, &flow, &l0, &l1, &s0, &s1);
    Ok(SceneSample {
        frame0: Image::from_raw_unchecked(h, w, c, f0),
        frame1: Image::from_raw_unchecked(h, w, c, f1),
        flow: FlowField::from_raw_unchecked(h, w, flow),
        occlusion,
        shadow_region,
        depth: DepthLabels {
            frame0: l0,
            frame1: l1,
        },
        provenance: Provenance::default(),
    })
}

fn occlusion_and_shadow(
    h: usize,
    w: usize,
    flow: &[[f32; 2]],
    l0: &[u16],
    l1: &[u16],
    s0: &[f32],
    s1: &[f32],
) -> (Mask, Mask) {
    let mut occ = vec![0.0f32; h * w];
    let mut shadow = vec![0.0f32; h * w];
    let any_shadow1 = s1.iter().any(|&v| v > 0.0);
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    par::for_each_row_pair_mut(&mut occ, w, &mut shadow, w, |y, occ, shadow| {
        for x in 0..w {
            let i = y * w + x;
            let tx = x as f64 + flow[i][0] as f64;
            let ty = y as f64 + flow[i][1] as f64;
            let inside = tx >= 0.0 && tx <= wf && ty >= 0.0 && ty <= hf;
            if !inside {
                occ[x] = 1.0;
            } else {
                // nearest pixel, ties rounding up; both are non-negative
                let (rx, ry) = ((tx + 0.5) as usize, (ty + 0.5) as usize);
                if l1[ry * w + rx] != l0[i] {
                    occ[x] = 1.0;
                }
            }
            let mut shaded = s0[i] > 0.0;
            if !shaded && inside && any_shadow1 {
                let (xf, yf) = (tx as usize, ty as usize);
                let (fx, fy) = (tx - xf as f64, ty - yf as f64);
                let taps = [
                    (xf, yf, (1.0 - fx) * (1.0 - fy)),
                    (xf + 1, yf, fx * (1.0 - fy)),
                    (xf, yf + 1, (1.0 - fx) * fy),
                    (xf + 1, yf + 1, fx * fy),
                ];
                shaded = taps
                    .iter()
                    .any(|&(px, py, wgt)| wgt > 0.0 && px < w && py < h && s1[py * w + px] > 0.0);
            }
            if shaded {
                shadow[x] = 1.0;
            }
        }
    });
    (
        Mask::from_raw_unchecked(h, w, occ),
        Mask::from_raw_unchecked(h, w, shadow),
    )
}

/// Draws a full scene from `source`, filling the occluder hole from `aux`.
///
/// The sample is a pure function of the inputs and `seed`.
pub fn generate_sample(
    source: &Image,
    aux: &Image,
    stack: &SegmentationStack,
    config: &SynthesisConfig,
    seed: u64,
) -> Result<SceneSample> {
    let (h, w) = source.dims();
    if aux.dims() != (h, w) || aux.channels() != source.channels() {
        return Err(dim_mismatch("auxiliary image", (h, w), aux.dims()));
    }
    if stack.dims() != (h, w) {
        return Err(dim_mismatch("segmentation stack", (h, w), stack.dims()));
    }
    if stack.len() != config.component_counts.len() {
        return Err(Error::InvalidParameter(format!(
            "stack has {} granularities, config expects {}",
            stack.len(),
            config.component_counts.len()
        )));
    }
    let plan = ScenePlan::draw(config, h, w, &mut stage_rng(seed, Stage::Plan))?;

    let mut mask_rng = stage_rng(seed, Stage::Masks);
    let mut masks = Vec::with_capacity(plan.layers.len());
    let mut records = Vec::with_capacity(plan.layers.len());
    let mut redraws = 0;
    for (i, layer) in plan.layers.iter().enumerate() {
        let mut accepted = None;
        for _ in 0..config.max_redraws {
            let occ = grow_occluder(stack, layer.granularity, layer.target_size, &mut mask_rng)?;
            let n = occ.mask.count_set();
            if n > 0 && n < h * w {
                accepted = Some(occ);
                break;
            }
            redraws += 1;
        }
        let occ = accepted.ok_or_else(|| {
            Error::DegenerateLayer(format!(
                "layer {i}: no usable occluder after {} draws",
                config.max_redraws
            ))
        })?;
        records.push(occ.record());
        masks.push(occ.mask);
    }

    // shadows keep the texture underneath, so they are not cut out
    let mut hole = vec![0.0f32; h * w];
    for (m, l) in masks.iter().zip(&plan.layers) {
        if !l.kind.is_shadow() {
            for (a, &b) in hole.iter_mut().zip(m.data()) {
                *a = a.max(b);
            }
        }
    }
    let hole = Mask::from_raw_unchecked(h, w, hole);
    let inpainted = inpaint_with_auxiliary(source, &hole, aux)?;
    let reg = config.tps_regularization;
    let bg_spec = BackgroundSpec {
        warp1: fit_tps(&plan.background.warp1, reg)?,
        warp0: fit_tps(&plan.background.warp0, reg)?,
        shift: plan.background.shift,
    };
    let bg = synthesize_background_with_stride(&inpainted, &bg_spec, config.warp_stride)?;

    let mut layers = Vec::with_capacity(masks.len());
    for (i, (mask, lp)) in masks.into_iter().zip(&plan.layers).enumerate() {
        let spec = LayerSpec {
            mask,
            kind: lp.kind,
            warp1: fit_tps(&lp.warp1, reg)?,
            warp0: fit_tps(&lp.warp0, reg)?,
            placement0: [0.0, 0.0],
            placement1: lp.delta,
            depth_rank: i as i32,
        };
        let render = render_layer_with_stride(source, &spec, config.warp_stride)?;
        layers.push((spec, render));
    }
    let mut sample = composite_owned(bg, &layers)?;
    sample.provenance = Provenance {
        seed,
        plan: Some(plan),
        occluders: records,
        redraws,
        augmentation: None,
    };
    Ok(sample)
}

#[cfg(test)]
mod tests;

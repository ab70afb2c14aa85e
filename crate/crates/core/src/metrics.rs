//! Flow evaluation and the warp-back self-check of generated samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{dim_mismatch, BorderPolicy, FlowField, Image, Mask, RasterRef};
use crate::par;
use crate::scene::SceneSample;

/// When a pixel counts as an outlier for F1-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierRule {
    /// Error above 3 px and above 5% of the true magnitude (KITTI devkit).
    #[default]
    Both,
    /// Error above 3 px or above 5% of the true magnitude.
    Either,
}

impl OutlierRule {
    pub fn is_outlier(self, err: f64, gt_mag: f64) -> bool {
        let abs = err > 3.0;
        let rel = err > 0.05 * gt_mag;
        match self {
            OutlierRule::Both => abs && rel,
            OutlierRule::Either => abs || rel,
        }
    }
}

/// Sums from which EPE and F1-all follow; merging is associative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowErrorStats {
    pub n_valid: u64,
    pub epe_sum: f64,
    pub outliers: u64,
}

impl FlowErrorStats {
    pub fn compute(pred: &FlowField, gt: &FlowField, valid: &Mask, rule: OutlierRule) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(dim_mismatch("prediction", gt.dims(), pred.dims()));
        }
        if valid.dims() != gt.dims() {
            return Err(dim_mismatch("validity mask", gt.dims(), valid.dims()));
        }
        let mut s = Self::default();
        for ((p, g), &m) in pred.vectors().iter().zip(gt.vectors()).zip(valid.data()) {
            if m < 0.5 {
                continue;
            }
            let du = f64::from(p[0]) - f64::from(g[0]);
            let dv = f64::from(p[1]) - f64::from(g[1]);
            let err = du.hypot(dv);
            s.n_valid += 1;
            s.epe_sum += err;
            if rule.is_outlier(err, f64::from(g[0]).hypot(f64::from(g[1]))) {
                s.outliers += 1;
            }
        }
        Ok(s)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            n_valid: self.n_valid + other.n_valid,
            epe_sum: self.epe_sum + other.epe_sum,
            outliers: self.outliers + other.outliers,
        }
    }

    pub fn epe(&self) -> Result<f64> {
        if self.n_valid == 0 {
            return Err(Error::EmptyEvaluation);
        }
        Ok(self.epe_sum / self.n_valid as f64)
    }

    pub fn f1_all(&self) -> Result<f64> {
        if self.n_valid == 0 {
            return Err(Error::EmptyEvaluation);
        }
        Ok(100.0 * self.outliers as f64 / self.n_valid as f64)
    }
}

/// Mean end-point error over valid pixels.
pub fn epe(pred: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    FlowErrorStats::compute(pred, gt, valid, OutlierRule::Both)?.epe()
}

/// Percentage of valid pixels that are outliers under `rule`.
pub fn f1_all(pred: &FlowField, gt: &FlowField, valid: &Mask, rule: OutlierRule) -> Result<f64> {
    FlowErrorStats::compute(pred, gt, valid, rule)?.f1_all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub name: String,
    pub epe: f64,
    pub f1_all: f64,
    pub n_valid: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Pixel-weighted over all samples.
    pub epe_mean: f64,
    pub f1_all: f64,
    pub n_valid: u64,
    pub rule: OutlierRule,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    /// Aggregates per-sample statistics; samples without valid pixels are
    /// listed with NaN scores and do not contribute.
    pub fn from_stats(items: Vec<(String, FlowErrorStats)>, rule: OutlierRule) -> Result<Self> {
        let total = items
            .iter()
            .fold(FlowErrorStats::default(), |a, (_, s)| a.merge(*s));
        let per_sample = items
            .into_iter()
            .map(|(name, s)| SampleEval {
                name,
                epe: s.epe().unwrap_or(f64::NAN),
                f1_all: s.f1_all().unwrap_or(f64::NAN),
                n_valid: s.n_valid,
            })
            .collect();
        Ok(Self {
            epe_mean: total.epe()?,
            f1_all: total.f1_all()?,
            n_valid: total.n_valid,
            rule,
            per_sample,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditThresholds {
    pub max_mean: f64,
    pub max_p99: f64,
}

impl Default for AuditThresholds {
    fn default() -> Self {
        Self {
            max_mean: 0.02,
            max_p99: 0.1,
        }
    }
}

/// Upper edge of the last finite magnitude bin; bins are 1 px wide and one
/// overflow bin follows.
pub const HISTOGRAM_MAX: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Mean over checked pixels of the channel-averaged absolute difference
    /// between frame 0 and frame 1 warped back by the flow.
    pub mean: f64,
    /// 99th percentile (nearest rank) of the same differences.
    pub p99: f64,
    /// Pixels outside occlusion and shadow.
    pub n_checked: usize,
    pub occlusion_fraction: f64,
    pub shadow_fraction: f64,
    pub magnitude_histogram: Vec<u64>,
    pub passed: bool,
}

/// Warps frame 1 back by the flow and compares it to frame 0 on pixels that
/// are neither occluded nor shadowed.
pub fn photometric_audit(sample: &SceneSample, thresholds: &AuditThresholds) -> Result<AuditReport> {
    audit_parts(
        &sample.frame0,
        &sample.frame1,
        &sample.flow,
        &sample.occlusion,
        &sample.shadow_region,
        thresholds,
    )
}

pub fn audit_parts(
    frame0: &Image,
    frame1: &Image,
    flow: &FlowField,
    occlusion: &Mask,
    shadow: &Mask,
    thresholds: &AuditThresholds,
) -> Result<AuditReport> {
    let dims = frame0.dims();
    for (what, d) in [
        ("frame 1", frame1.dims()),
        ("flow", flow.dims()),
        ("occlusion mask", occlusion.dims()),
        ("shadow mask", shadow.dims()),
    ] {
        if d != dims {
            return Err(dim_mismatch(what, dims, d));
        }
    }
    if frame1.channels() != frame0.channels() {
        return Err(Error::InvalidDimension(format!(
            "frames carry {} and {} channels",
            frame0.channels(),
            frame1.channels()
        )));
    }
    let (h, w) = dims;
    let c = frame0.channels();
    let src = RasterRef::image(frame1);
    let vectors = flow.vectors();
    let mut diffs = vec![f32::NAN; h * w];
    par::for_each_row_mut(&mut diffs, w, |y, row| {
        let mut px = [0.0f32; 3];
        for (x, d) in row.iter_mut().enumerate() {
            let i = y * w + x;
            if occlusion.data()[i] > 0.0 || shadow.data()[i] > 0.0 {
                continue;
            }
            let [u, v] = vectors[i];
            src.sample_into(
                x as f64 + f64::from(u),
                y as f64 + f64::from(v),
                BorderPolicy::ClampToEdge,
                &mut px[..c],
            );
            let a = &frame0.data()[i * c..(i + 1) * c];
            *d = a.iter().zip(&px[..c]).map(|(p, q)| (p - q).abs()).sum::<f32>() / c as f32;
        }
    });
    let mut checked: Vec<f32> = diffs.into_iter().filter(|d| !d.is_nan()).collect();
    let n_checked = checked.len();
    let (mean, p99) = if n_checked == 0 {
        (0.0, 0.0)
    } else {
        let mean = checked.iter().map(|&d| f64::from(d)).sum::<f64>() / n_checked as f64;
        let rank = ((0.99 * n_checked as f64).ceil() as usize).clamp(1, n_checked);
        let (_, p, _) = checked.select_nth_unstable_by(rank - 1, f32::total_cmp);
        (mean, f64::from(*p))
    };
    let mut magnitude_histogram = vec![0u64; HISTOGRAM_MAX + 1];
    for [u, v] in vectors {
        let bin = (u.hypot(*v) as usize).min(HISTOGRAM_MAX);
        magnitude_histogram[bin] += 1;
    }
    let n = (h * w) as f64;
    Ok(AuditReport {
        mean,
        p99,
        n_checked,
        occlusion_fraction: occlusion.count_set() as f64 / n,
        shadow_fraction: shadow.count_set() as f64 / n,
        magnitude_histogram,
        passed: mean <= thresholds.max_mean && p99 <= thresholds.max_p99,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::augment::flip;
    use crate::synthetic::{fixture_sample, procedural_image};

    fn rng_flow(seed: u64, h: usize, w: usize, scale: f32) -> FlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<[f32; 2]> = (0..h * w)
            .map(|_| [rng.random_range(-scale..scale), rng.random_range(-scale..scale)])
            .collect();
        FlowField::from_vectors(h, w, v).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let gt = rng_flow(1, 6, 7, 20.0);
        let valid = Mask::filled(6, 7, 1.0).unwrap();
        assert_eq!(epe(&gt, &gt, &valid).unwrap(), 0.0);
        assert_eq!(f1_all(&gt, &gt, &valid, OutlierRule::Both).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_is_three_four_five() {
        let gt = rng_flow(2, 5, 5, 10.0);
        let pred = FlowField::from_vectors(5, 5, gt.vectors().iter().map(|[u, v]| [u + 3.0, v + 4.0]).collect()).unwrap();
        let valid = Mask::filled(5, 5, 1.0).unwrap();
        assert!((epe(&pred, &gt, &valid).unwrap() - 5.0).abs() < 1e-5);
        let gt0 = FlowField::zeros(5, 5).unwrap();
        let pred0 = FlowField::constant(5, 5, [3.0, 4.0]).unwrap();
        assert_eq!(epe(&pred0, &gt0, &valid).unwrap(), 5.0);
    }

    #[test]
    fn outlier_rules() {
        let valid = Mask::filled(3, 3, 1.0).unwrap();
        let gt = FlowField::constant(3, 3, [100.0, 0.0]).unwrap();
        let pred = FlowField::constant(3, 3, [104.0, 0.0]).unwrap();
        assert_eq!(f1_all(&pred, &gt, &valid, OutlierRule::Both).unwrap(), 0.0);
        assert_eq!(f1_all(&pred, &gt, &valid, OutlierRule::Either).unwrap(), 100.0);
        let gt = FlowField::constant(3, 3, [0.0, 10.0]).unwrap();
        let pred = FlowField::constant(3, 3, [0.0, 14.0]).unwrap();
        assert_eq!(f1_all(&pred, &gt, &valid, OutlierRule::Both).unwrap(), 100.0);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let gt = FlowField::zeros(3, 3).unwrap();
        let none = Mask::zeros(3, 3).unwrap();
        assert!(matches!(epe(&gt, &gt, &none), Err(Error::EmptyEvaluation)));
        assert!(matches!(f1_all(&gt, &gt, &none, OutlierRule::Both), Err(Error::EmptyEvaluation)));
        let other = FlowField::zeros(3, 4).unwrap();
        assert!(epe(&other, &gt, &Mask::filled(3, 3, 1.0).unwrap()).is_err());
    }

    #[test]
    fn report_aggregates_by_pixel() {
        let valid = Mask::filled(2, 2, 1.0).unwrap();
        let half = Mask::from_fn(2, 2, |x, _| (x == 0) as u8 as f32).unwrap();
        let gt = FlowField::zeros(2, 2).unwrap();
        let a = FlowErrorStats::compute(&FlowField::constant(2, 2, [1.0, 0.0]).unwrap(), &gt, &valid, OutlierRule::Both).unwrap();
        let b = FlowErrorStats::compute(&FlowField::constant(2, 2, [4.0, 0.0]).unwrap(), &gt, &half, OutlierRule::Both).unwrap();
        let r = EvalReport::from_stats(vec![("a".into(), a), ("b".into(), b)], OutlierRule::Both).unwrap();
        assert_eq!(r.n_valid, 6);
        assert!((r.epe_mean - 12.0 / 6.0).abs() < 1e-12);
        assert!((r.f1_all - 100.0 * 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.per_sample[1].epe, 4.0);
    }

    proptest! {
        #[test]
        fn epe_ignores_pixel_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
            let (h, w) = (4, 5);
            let gt = rng_flow(seed, h, w, 15.0);
            let pred = rng_flow(seed ^ 1, h, w, 15.0);
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let bits: Vec<f32> = (0..h * w).map(|i| if i == 0 { 1.0 } else { (rng.random::<f32>() < 0.7) as u8 as f32 }).collect();
            let valid = Mask::from_data(h, w, bits).unwrap();
            let mut order: Vec<usize> = (0..h * w).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permute_f = |f: &FlowField| FlowField::from_vectors(h, w, order.iter().map(|&i| f.vectors()[i]).collect()).unwrap();
            let permute_m = Mask::from_data(h, w, order.iter().map(|&i| valid.data()[i]).collect()).unwrap();
            let a = epe(&pred, &gt, &valid).unwrap();
            let b = epe(&permute_f(&pred), &permute_f(&gt), &permute_m).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn f1_is_flip_invariant(seed in any::<u64>()) {
            let mut gt = fixture_sample(6, 8, seed % 100);
            gt.flow = rng_flow(seed, 6, 8, 12.0);
            let mut pred = gt.clone();
            pred.flow = rng_flow(seed ^ 7, 6, 8, 12.0);
            let valid = Mask::filled(6, 8, 1.0).unwrap();
            for rule in [OutlierRule::Both, OutlierRule::Either] {
                let a = f1_all(&pred.flow, &gt.flow, &valid, rule).unwrap();
                let b = f1_all(&flip(pred.clone(), true, false).flow, &flip(gt.clone(), true, false).flow, &valid, rule).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn identity_sample_audits_to_zero() {
        let mut s = fixture_sample(10, 12, 1);
        s.frame1 = s.frame0.clone();
        s.flow = FlowField::zeros(10, 12).unwrap();
        let r = photometric_audit(&s, &AuditThresholds::default()).unwrap();
        assert_eq!((r.mean, r.p99), (0.0, 0.0));
        assert!(r.passed);
        assert_eq!(r.magnitude_histogram[0], 120);
        assert_eq!(r.n_checked, 120 - s.occlusion.binary().iter().zip(s.shadow_region.binary()).filter(|(a, b)| **a || *b).count());
    }

    #[test]
    fn translation_only_sample_passes_tightly() {
        // frame 1 is frame 0 moved by (2.5, -1.25); pixels leaving frame 1 are occluded
        let (h, w) = (48, 64);
        let base = procedural_image(h + 8, w + 8, 4).unwrap();
        let (dx, dy) = (2.5f64, -1.25f64);
        let frame0 = Image::from_fn(h, w, 3, |x, y, c| base.get(x + 4, y + 4, c)).unwrap();
        let grid = crate::imaging::CoordGrid::from_fn(h, w, |x, y| [x as f64 + 4.0 - dx, y as f64 + 4.0 - dy]).unwrap();
        let frame1 = crate::imaging::bilinear_sample(&base, &grid, BorderPolicy::ClampToEdge).unwrap();
        let flow = FlowField::constant(h, w, [dx as f32, dy as f32]).unwrap();
        let occlusion = Mask::from_fn(h, w, |x, y| {
            let (tx, ty) = (x as f64 + dx, y as f64 + dy);
            (tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64) as u8 as f32
        })
        .unwrap();
        let shadow = Mask::zeros(h, w).unwrap();
        let r = audit_parts(&frame0, &frame1, &flow, &occlusion, &shadow, &AuditThresholds::default()).unwrap();
        assert!(r.mean <= 0.005, "{}", r.mean);
        assert!(r.passed);
        assert_eq!(r.magnitude_histogram[2], (h * w) as u64);
    }

    #[test]
    fn wrong_flow_fails_the_audit() {
        let mut s = fixture_sample(40, 50, 2);
        s.frame1 = procedural_image(40, 50, 9).unwrap();
        s.occlusion = Mask::zeros(40, 50).unwrap();
        let r = photometric_audit(&s, &AuditThresholds::default()).unwrap();
        assert!(!r.passed);
    }
}

//! Random scene parameters, drawn before any pixel work.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SynthesisConfig;
use crate::error::{Error, Result};
use crate::tps::{sample_control_grid, ControlGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum LayerKind {
    Opaque,
    /// Semi-transparent black layer; darkens what lies below it and keeps
    /// the background motion as ground truth.
    Shadow { opacity: f64 },
}

impl LayerKind {
    pub fn is_shadow(&self) -> bool {
        matches!(self, LayerKind::Shadow { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlan {
    /// Control grid of the first warp (`phi_1`, frame 1 from the inpainted image).
    pub warp1: ControlGrid,
    /// Control grid of the second warp (`phi_0`, frame 0 from frame 1).
    pub warp0: ControlGrid,
    pub shift: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub kind: LayerKind,
    /// Index into the segmentation stack.
    pub granularity: usize,
    pub target_size: usize,
    pub warp1: ControlGrid,
    pub warp0: ControlGrid,
    /// Motion of the layer from frame 0 to frame 1.
    pub delta: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePlan {
    pub height: usize,
    pub width: usize,
    pub background: BackgroundPlan,
    /// Layers in depth order; the last one is on top.
    pub layers: Vec<LayerPlan>,
}

fn normal_pair<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Result<[f64; 2]> {
    if sigma == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok([n.sample(rng), n.sample(rng)])
}

impl ScenePlan {
    /// Draws every scene parameter for a `height x width` sample.
    pub fn draw<R: Rng + ?Sized>(
        config: &SynthesisConfig,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let grid = |rng: &mut R| -> Result<ControlGrid> {
            let l = rng.random_range(config.tps_grid_range.0..=config.tps_grid_range.1);
            sample_control_grid(
                height,
                width,
                l,
                config.control_noise_sigma,
                config.control_noise,
                rng,
            )
        };
        let background = BackgroundPlan {
            warp1: grid(rng)?,
            warp0: grid(rng)?,
            shift: normal_pair(config.global_shift_sigma, rng)?,
        };
        let n = rng.random_range(config.n_layers_range.0..=config.n_layers_range.1);
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let granularity = rng.random_range(0..config.component_counts.len());
            let target_size =
                rng.random_range(config.occluder_size_range.0..=config.occluder_size_range.1);
            let kind = if rng.random_bool(config.shadow_prob) {
                let (lo, hi) = config.shadow_opacity_range;
                let opacity = if lo < hi { rng.random_range(lo..hi) } else { lo };
                LayerKind::Shadow { opacity }
            } else {
                LayerKind::Opaque
            };
            layers.push(LayerPlan {
                kind,
                granularity,
                target_size,
                warp1: grid(rng)?,
                warp0: grid(rng)?,
                delta: normal_pair(config.layer_shift_sigma, rng)?,
            });
        }
        Ok(Self {
            height,
            width,
            background,
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn draws_respect_ranges() {
        let cfg = SynthesisConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = ScenePlan::draw(&cfg, 120, 160, &mut rng).unwrap();
            assert!((8..=14).contains(&p.layers.len()));
            for l in &p.layers {
                assert!((6000..=50000).contains(&l.target_size));
                assert!((3..=5).contains(&l.warp0.grid_size));
                assert!(l.granularity < 2);
                if let LayerKind::Shadow { opacity } = l.kind {
                    assert!((0.4..0.6).contains(&opacity));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let cfg = SynthesisConfig::default();
        let a = ScenePlan::draw(&cfg, 50, 60, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ScenePlan::draw(&cfg, 50, 60, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn plan_serializes() {
        let cfg = SynthesisConfig::default();
        let p = ScenePlan::draw(&cfg, 50, 60, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: ScenePlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::SlicParams;
use crate::tps::{ControlNoise, DEFAULT_REGULARIZATION};

/// Scene-synthesis hyperparameters. All integer ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Number of foreground layers per sample.
    pub n_layers_range: (usize, usize),
    /// Target pixel count of one occluder.
    pub occluder_size_range: (usize, usize),
    /// Control lattice size `L` per warp.
    pub tps_grid_range: (usize, usize),
    /// Standard deviation of control-point displacement, pixels.
    pub control_noise_sigma: f64,
    pub control_noise: ControlNoise,
    /// Standard deviation of the background shift `d`, per component.
    pub global_shift_sigma: f64,
    /// Standard deviation of the layer motion `delta`, per component.
    pub layer_shift_sigma: f64,
    pub shadow_prob: f64,
    pub shadow_opacity_range: (f64, f64),
    /// SLIC component counts, coarse to fine.
    pub component_counts: Vec<usize>,
    pub slic: SlicParams,
    pub tps_regularization: f64,
    /// Dense warps are evaluated exactly every `warp_stride` pixels and
    /// bilinearly interpolated in between; 1 evaluates every pixel.
    pub warp_stride: usize,
    /// Attempts per layer before an empty or full-frame occluder is fatal.
    pub max_redraws: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            n_layers_range: (8, 14),
            occluder_size_range: (6000, 50000),
            tps_grid_range: (3, 5),
            control_noise_sigma: 25.0,
            control_noise: ControlNoise::Gaussian,
            global_shift_sigma: 30.0,
            layer_shift_sigma: 30.0,
            shadow_prob: 0.2,
            shadow_opacity_range: (0.4, 0.6),
            component_counts: vec![100, 1000],
            slic: SlicParams::default(),
            tps_regularization: DEFAULT_REGULARIZATION,
            warp_stride: 4,
            max_redraws: 10,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        let (nl, nh) = self.n_layers_range;
        if nl > nh {
            return bad(format!("layer range [{nl}, {nh}] is empty"));
        }
        let (ol, oh) = self.occluder_size_range;
        if ol == 0 || ol > oh {
            return bad(format!("occluder size range [{ol}, {oh}] is empty or starts at 0"));
        }
        let (gl, gh) = self.tps_grid_range;
        if gl < 2 || gl > gh {
            return bad(format!("control grid range [{gl}, {gh}] must be non-empty with L >= 2"));
        }
        for (name, s) in [
            ("control_noise_sigma", self.control_noise_sigma),
            ("global_shift_sigma", self.global_shift_sigma),
            ("layer_shift_sigma", self.layer_shift_sigma),
            ("tps_regularization", self.tps_regularization),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {s}"));
            }
        }
        if !(0.0..=1.0).contains(&self.shadow_prob) {
            return bad(format!("shadow_prob {} outside [0, 1]", self.shadow_prob));
        }
        let (al, ah) = self.shadow_opacity_range;
        if !(0.0 <= al && al <= ah && ah <= 1.0) {
            return bad(format!("shadow opacity range [{al}, {ah}] must lie in [0, 1]"));
        }
        if self.component_counts.is_empty()
            || self.component_counts.contains(&0)
            || self.component_counts.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("component counts must be positive and strictly increasing".into());
        }
        if self.warp_stride == 0 {
            return bad("warp_stride must be >= 1".into());
        }
        if self.max_redraws == 0 {
            return bad("max_redraws must be >= 1".into());
        }
        Ok(())
    }
}

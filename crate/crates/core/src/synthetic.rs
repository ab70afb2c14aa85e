//! Procedural source images for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::Image;

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    soft: f32,
    color: [f32; 3],
}

/// A smooth RGB image with a shaded backdrop and soft-edged blobs of flat
/// color, deterministic in `seed`.
pub fn procedural_image(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wf, hf) = (width as f32, height as f32);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad: [[f32; 2]; 3] =
        std::array::from_fn(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]);
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1.0..6.0) / wf,
                rng.random_range(1.0..6.0) / hf,
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.08),
            )
        })
        .collect();
    let blobs: Vec<Blob> = (0..rng.random_range(6..14))
        .map(|_| {
            let r = rng.random_range(0.05..0.25) * wf.min(hf);
            Blob {
                cx: rng.random_range(0.0..wf),
                cy: rng.random_range(0.0..hf),
                rx: r * rng.random_range(0.6..1.6),
                ry: r * rng.random_range(0.6..1.6),
                soft: rng.random_range(1.5..4.0),
                color: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
            }
        })
        .collect();
    Image::from_fn(height, width, 3, |x, y, c| {
        let (u, v) = (x as f32 / wf - 0.5, y as f32 / hf - 0.5);
        let mut val = base[c] + grad[c][0] * u + grad[c][1] * v;
        for (i, &(fx, fy, ph, amp)) in waves.iter().enumerate() {
            let t = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + ph + i as f32 * c as f32;
            val += amp * t.sin();
        }
        for b in &blobs {
            let dx = (x as f32 - b.cx) / b.rx;
            let dy = (y as f32 - b.cy) / b.ry;
            let d = ((dx * dx + dy * dy).sqrt() - 1.0) * b.rx.min(b.ry);
            let a = 1.0 / (1.0 + (d / b.soft * 2.0).exp());
            val = a * b.color[c] + (1.0 - a) * val;
        }
        val
    })
}

/// A structurally valid sample with unrelated frames and a smooth flow,
/// for format and plumbing tests.
#[cfg(test)]
pub(crate) fn fixture_sample(height: usize, width: usize, seed: u64) -> crate::scene::SceneSample {
    use crate::imaging::{FlowField, Mask};
    use crate::scene::{DepthLabels, Provenance, SceneSample};
    let flow = FlowField::from_fn(height, width, |x, y| {
        [1.5 + (x as f32 / 7.0).sin(), -0.5 + (y as f32 / 5.0).cos()]
    })
    .unwrap();
    SceneSample {
        frame0: procedural_image(height, width, seed).unwrap(),
        frame1: procedural_image(height, width, seed + 1).unwrap(),
        flow,
        occlusion: Mask::from_fn(height, width, |x, y| ((x * 3 + y) % 7 == 0) as u8 as f32).unwrap(),
        shadow_region: Mask::from_fn(height, width, |x, _| (x % 5 == 0) as u8 as f32).unwrap(),
        depth: DepthLabels {
            frame0: vec![0; height * width],
            frame1: vec![0; height * width],
        },
        provenance: Provenance {
            seed,
            ..Provenance::default()
        },
    }
}

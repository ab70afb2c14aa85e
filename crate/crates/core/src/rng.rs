//! Seed derivation.
//!
//! A run is driven by one 64-bit seed. Sample `i` gets its own seed through a
//! counter-based hash of `(global, i)`, and each stage inside a sample draws
//! from a separate ChaCha stream of that seed, so any sample can be
//! regenerated in isolation and worker scheduling never changes the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// Independent random streams used while building one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    /// Source/auxiliary image choice.
    Corpus = 1,
    /// Scene parameters: layer count, sizes, warps, shifts, shadows.
    Plan = 2,
    /// Occluder seeds and region growth.
    Masks = 3,
    Augment = 4,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` within a run seeded by `global`.
pub fn sample_seed(global: u64, index: u64) -> u64 {
    splitmix64(splitmix64(global) ^ index.wrapping_mul(0xD605_BBB5_8C8A_BBFD))
}

pub fn stage_rng(seed: u64, stage: Stage) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

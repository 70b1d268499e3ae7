//! Seeded randomness.
//!
//! Every random draw in the crate goes through ChaCha8 (`rand_chacha::ChaCha8Rng`),
//! seeded with a 64-bit seed and split into independent streams via the ChaCha
//! stream counter. Output is identical across platforms for a given `(seed, stream)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SplatRng = ChaCha8Rng;

/// Named stream ids so unrelated consumers never share a sequence.
pub mod streams {
    pub const SCENE: u64 = 1;
    pub const CAMERAS: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const DENOISER: u64 = 5;
    pub const SAMPLER: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> SplatRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed; used to give each pipeline stage or call its own sequence.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut SplatRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut SplatRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

//! Seed plumbing. Every random stream in the crate is a `ChaCha8Rng` derived
//! from one of the two user-facing seeds plus a stream tag.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seeds.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> LabRng {
    LabRng::seed_from_u64(mix(seed, tag))
}

pub fn seeded(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Named stream tags so that unrelated consumers never share a stream.
pub mod tags {
    pub const PRETRAIN: u64 = 1;
    pub const PERSONALIZE: u64 = 2;
    pub const PRIOR_BATCH: u64 = 3;
    pub const PRIOR_SET: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const LORA_INIT: u64 = 7;
    pub const MODEL_INIT: u64 = 8;
    pub const CALIBRATE: u64 = 9;
}

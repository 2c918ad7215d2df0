//! Seed derivation and the generator type used for every random stream.
//!
//! Child seeds are derived with SplitMix64: `child(tag)` mixes the parent state
//! with `tag * 0x9E3779B97F4A7C15` and runs the SplitMix64 finalizer. The scheme
//! is stable across releases; benchmark reports depend on it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator behind every sampling stream.
pub type FlowRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream(splitmix64(master))
    }

    pub fn child(self, tag: u64) -> Self {
        SeedStream(splitmix64(self.0 ^ tag.wrapping_mul(GOLDEN)))
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> FlowRng {
        FlowRng::seed_from_u64(self.0)
    }
}

pub fn rng_from_seed(seed: u64) -> FlowRng {
    FlowRng::seed_from_u64(seed)
}

/// Fills a vector with standard normal draws.
pub fn standard_normals<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

//! Seeded, splittable randomness.
//!
//! Every stochastic operation in the crate takes an explicit 64-bit seed and
//! derives independent streams from it via [`split_seed`], so nested
//! procedures (per-layer re-initialization, per-mask draws, per-epoch
//! shuffles) stay reproducible without shared RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent child seed for stream `stream` of `seed`.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0xa076_1d64_78bd_642f)))
}

/// Deterministic generator for one seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for stream `stream` derived from `seed`.
pub fn rng_split(seed: u64, stream: u64) -> ChaCha8Rng {
    rng_from(split_seed(seed, stream))
}

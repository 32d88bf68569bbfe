//! Seeded randomness.
//!
//! Every stochastic step in the crate (weight init, shuffling, k-means
//! seeding, mask generation) draws from a [`SeededRng`] created here, so a
//! single `u64` seed fully determines a run. [`mix_seed`] derives independent
//! stream seeds from a base seed plus a tag, which keeps unrelated consumers
//! (e.g. the mask and the weight init of the same run) decorrelated without
//! threading one generator through everything.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The deterministic generator used throughout.
pub type SeededRng = ChaCha8Rng;

/// Builds the crate-wide generator from a bare seed.
pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer: a cheap, well-mixed u64 -> u64 permutation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and a tag.
///
/// Different tags give uncorrelated streams; equal inputs give equal outputs.
pub fn mix_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base.wrapping_add(splitmix64(tag)))
}

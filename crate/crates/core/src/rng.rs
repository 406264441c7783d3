//! Seed plumbing.
//!
//! Every random stream in the crate is a SplitMix64 generator (64-bit state)
//! whose seed is derived from one master seed and a stream label, so each
//! stream is reproducible on every platform.

use rand::SeedableRng;

pub type SeededRng = rand_xoshiro::SplitMix64;

pub fn rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// SplitMix64 output function; a bijective mix of 64 bits.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for stream `label` from `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(mix64(master), |acc, b| mix64(acc ^ u64::from(b)))
}

/// Derives the seed of the `index`-th member of a family of streams.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    mix64(derive_seed(master, label) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

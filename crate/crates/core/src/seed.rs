//! Seed derivation. Every random stream in the pipeline is a ChaCha8
//! generator keyed by a value mixed from a global seed and a few labels, so
//! any stage can be replayed on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a. Stable across platforms and compiler versions, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mix a sequence of words into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for a named pipeline stage.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    mix(&[global, fnv1a(stage.as_bytes())])
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

// Stream labels.
pub const INIT: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const DROPOUT: u64 = 3;
pub const SPLIT: u64 = 4;
pub const PROBE: u64 = 5;
pub const TSNE: u64 = 6;
pub const SAMPLE: u64 = 7;

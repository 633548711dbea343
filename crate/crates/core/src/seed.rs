//! Deterministic derivation of sub-seeds from a master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of labels into a seed, e.g. `derive(master, &[ROUND, t, client])`.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(master), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Domain tags keep streams for different purposes apart.
pub const TAG_INIT: u64 = 0x1;
pub const TAG_PARTICIPANTS: u64 = 0x2;
pub const TAG_SHUFFLE: u64 = 0x3;
pub const TAG_PERTURB: u64 = 0x4;
pub const TAG_PARTITION: u64 = 0x5;
pub const TAG_DATA: u64 = 0x6;
pub const TAG_SPECTRUM: u64 = 0x7;

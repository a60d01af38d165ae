//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha stream keyed by a master seed
//! and selected by a stream id, so results do not depend on which thread
//! (or in which order) a stream is consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 finalizer; used to fold stream labels into a single id.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a list of labels into one stream id.
pub fn stream_id(labels: &[u64]) -> u64 {
    labels.iter().fold(0x5EED_u64, |acc, &l| mix64(acc ^ mix64(l)))
}

/// Independent generator for `(seed, labels...)`.
pub fn stream(seed: u64, labels: &[u64]) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(labels));
    rng
}

/// Stream labels used across the crate.
pub mod label {
    pub const INIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const DOMINOES: u64 = 4;
    pub const FLIP: u64 = 5;
    pub const DROP: u64 = 6;
    pub const SPEC: u64 = 7;
    pub const SPLIT: u64 = 8;
}

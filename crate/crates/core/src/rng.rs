//! Seed derivation.
//!
//! Every random draw in the toolkit comes from a ChaCha8 stream keyed by a
//! 64-bit seed and addressed by a stream number. Parallel loops take one
//! substream per index, so results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a of a label.
pub fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Child seed for a named stage: `mix64(root ^ fnv1a(name))`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    mix64(root ^ fnv1a(name))
}

/// Child seed for an indexed replicate (trial, restart, K value, ...).
pub fn derive_indexed(root: u64, index: u64) -> u64 {
    mix64(root ^ mix64(index.wrapping_add(0x5151_5151)))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-addressed substream: the key is derived from `(seed, round)` and the
/// ChaCha stream id is `index`.
pub fn substream(seed: u64, round: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(round)));
    rng.set_stream(index);
    rng
}

//! Seeded random streams.
//!
//! Every stochastic quantity in the crate (initial noise, weight init,
//! timestep sampling) is drawn from a ChaCha stream derived from a user seed
//! and a purpose label, so independent consumers never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// FNV-1a over bytes; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A generator for `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> SeededRng {
    let mixed = seed ^ fnv1a(label.as_bytes()).rotate_left(17);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// A generator for `(seed, label, index)`.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> SeededRng {
    let mixed = seed ^ fnv1a(label.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

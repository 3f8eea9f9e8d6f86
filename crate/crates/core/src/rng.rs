//! Seed derivation. Every random stream in the pipeline is a ChaCha8 stream
//! seeded from the root seed XOR a per-purpose tag, so subsystems can be
//! re-seeded independently and reruns are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `root ⊕ fnv1a(tag)`.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    root ^ fnv1a(tag.as_bytes())
}

/// Seed for the `index`-th item of a tagged stream (records, epochs, ...).
pub fn derive_indexed(root: u64, tag: &str, index: u64) -> u64 {
    derive_seed(root, tag) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

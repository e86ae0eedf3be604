//! Deterministic randomness.
//!
//! Two mechanisms, both stateless with respect to call order:
//!
//! * [`stream`] derives an independent ChaCha stream from a base seed and a
//!   string tag, used for parameter init and corpus generation.
//! * [`counter_unit`] is a counter-based generator (splitmix64 finalizer)
//!   that maps `(key, index)` to a unit float. Dropout masks are drawn from
//!   it so a mask depends only on its logical coordinates, never on how many
//!   random numbers were consumed earlier.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over raw bytes; used for config hashes and seed derivation.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer: a full-avalanche mix of one 64-bit word.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a key with an index into a new key.
pub fn mix2(key: u64, idx: u64) -> u64 {
    mix(key ^ mix(idx))
}

/// Uniform value in [0, 1) from `(key, idx)`.
pub fn counter_unit(key: u64, idx: u64) -> f64 {
    // 53 mantissa bits of the mixed word.
    (mix2(key, idx) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Independent seeded stream for the given tag.
pub fn stream(seed: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()))
}

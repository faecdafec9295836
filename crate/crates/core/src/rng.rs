//! Deterministic random streams.
//!
//! Every stochastic routine takes a `u64` seed. Sub-streams (per replication,
//! per method, per worker partition) are derived by hashing a base seed with
//! string tags and indices, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from a base seed, a list of tags and an index.
pub fn derive_seed(base: u64, tags: &[&str], index: u64) -> u64 {
    let mut h = splitmix64(base);
    for tag in tags {
        h = fnv1a(tag.as_bytes(), h ^ 0xCBF2_9CE4_8422_2325);
        // separator so ("ab","c") != ("a","bc")
        h = splitmix64(h ^ 0xFF);
    }
    splitmix64(h ^ splitmix64(index.wrapping_add(1)))
}

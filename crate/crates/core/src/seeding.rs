//! Named child streams derived from one master seed.
//!
//! Every random choice in the pipeline draws from `rng_for(master, stream, index)`,
//! so a component can be re-run in isolation and parallel work is independent of
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for the `index`-th member of a named stream.
pub fn child_seed(master: u64, stream: &str, index: u64) -> u64 {
    // FNV-1a over the stream name; stable across platforms and releases.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(splitmix64(master ^ h) ^ splitmix64(index.wrapping_add(h)))
}

pub fn rng_for(master: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(child_seed(master, stream, index))
}

//! Named, seed-derived random substreams.
//!
//! Every random draw is made from a stream keyed by `(seed, purpose, index)`,
//! so results do not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Independent generator for one `(purpose, index)` under `seed`.
pub fn substream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ fnv1a(purpose));
    h = splitmix64(h ^ index);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, for handing a seed to a component that makes its
/// own substreams.
pub fn child_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ fnv1a(purpose)) ^ index)
}

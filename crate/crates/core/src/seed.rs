//! Named random substreams derived from one master seed.
//!
//! Each consumer (parameter init, shuffling, subsampling, synthetic data)
//! draws from its own stream keyed by name, so enabling one feature never
//! shifts the random numbers another feature sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn stable_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for substream `name`, occurrence `index`.
pub fn substream_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(master ^ stable_hash(name)).wrapping_add(index))
}

pub fn substream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, name, index))
}

//! Named random substreams derived from a single root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `name` under `root`. Distinct names give independent streams.
pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(mix(root ^ fnv1a(name.as_bytes())))
}

/// Stream for `name` further split by an integer index (chain, fold, replication).
pub fn indexed(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix(mix(root ^ fnv1a(name.as_bytes())).wrapping_add(index)))
}

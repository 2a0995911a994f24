//! Seeded random substreams. Every consumer derives its own generator from
//! the experiment seed and a tag path, so results do not depend on the order
//! in which streams are drawn from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT_MODEL: u64 = 1;
pub const PARTITION: u64 = 2;
pub const VALIDATION: u64 = 3;
pub const SELECT: u64 = 4;
pub const HYPER: u64 = 5;
pub const THETA: u64 = 6;
pub const SHUFFLE: u64 = 7;
pub const SYNTHETIC: u64 = 8;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(seed, tags...)`. Distinct tag paths give unrelated streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h = splitmix(h ^ tags.len() as u64);
    ChaCha8Rng::seed_from_u64(h)
}

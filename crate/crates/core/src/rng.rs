//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (splits, initialization, attacks, domain
//! assignment) draws from its own stream so that one part of a run can be
//! reproduced without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const ATTACK: &str = "attack";
pub const DOMAINS: &str = "domains";
pub const TRAIN: &str = "train";

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the stream `name` of run `seed`. FNV-1a over the name keeps the
/// derivation stable across platforms and compiler versions.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix(seed ^ splitmix(h))
}

pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, name))
}

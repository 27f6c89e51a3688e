//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the run
//! seed plus a path of integers (episode index, purpose tag, member index,
//! ...). Streams never share state, so results do not depend on call order
//! across components or on thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags used when deriving streams.
pub mod tag {
    pub const ENV: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const WARMUP_ACTIONS: u64 = 3;
    pub const MASKS: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const PLAN: u64 = 6;
    pub const INIT: u64 = 7;
    pub const DATA: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of keys into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}

/// Child stream of an existing generator; consumes one word from `parent`.
pub fn fork(parent: &mut impl RngCore, key: u64) -> StreamRng {
    let base = parent.next_u64();
    stream(base, &[key])
}

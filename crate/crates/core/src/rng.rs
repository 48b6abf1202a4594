//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed, so sequences
//! are identical across platforms. Independent consumers (one per parameter,
//! one per synthetic sample) derive their own stream from the run seed and a
//! label, which keeps them stable when unrelated consumers are added.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    seeded(seed ^ fnv1a(label).rotate_left(17))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

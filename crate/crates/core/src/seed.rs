//! Deterministic sub-seed derivation.
//!
//! Every random stream in a run is seeded with
//! `derive_seed(master, stream, index)`: the stream label is folded into a
//! 64-bit key with FNV-1a, combined with the master seed and the counter, and
//! passed through two rounds of the SplitMix64 finalizer. Streams with
//! different labels or counters are statistically independent, and a sweep
//! entry can be re-run alone by reusing its `(master, stream, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(stream)) ^ index)
}

/// Portable seeded generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    rng(derive_seed(master, stream, index))
}

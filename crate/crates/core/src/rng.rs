//! Deterministic seed derivation.
//!
//! A run has one master seed. Each stage (`data`, `init`, `train`, `mcmc`, ...)
//! draws from its own stream, and per-individual work draws from a stream
//! keyed by the individual's index, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type BgmRng = ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const TRAIN: &str = "train";
pub const MCMC: &str = "mcmc";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the named stream under `master`.
pub fn stream_seed(master: u64, stream: &str) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a(stream))
}

/// Seed of item `index` within the named stream.
pub fn item_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(stream_seed(master, stream) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream_rng(master: u64, stream: &str) -> BgmRng {
    BgmRng::seed_from_u64(stream_seed(master, stream))
}

pub fn item_rng(master: u64, stream: &str, index: u64) -> BgmRng {
    BgmRng::seed_from_u64(item_seed(master, stream, index))
}

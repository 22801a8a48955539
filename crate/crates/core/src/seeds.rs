//! Seed derivation.
//!
//! A master seed is split into named substreams (`partition`, `sampling`,
//! `batching`, `codec`, `network`, ...) so that changing how one component
//! consumes randomness never shifts another component's stream.
//!
//! The derivation is: `FNV-1a-64(label)` xor'ed into the master seed, then
//! passed through the SplitMix64 finalizer. Per-(round, slot) streams fold the
//! two indices in with two further SplitMix64 rounds. All generators are
//! ChaCha8, whose output is stable across platforms and crate versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named substream of `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    mix64(master ^ fnv1a(label))
}

/// Seed for the stream owned by `slot` in `round`.
pub fn stream_seed(seed: u64, round: u64, slot: u64) -> u64 {
    mix64(mix64(seed ^ mix64(round)) ^ slot)
}

pub fn rng_from(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, round: u64, slot: u64) -> StreamRng {
    rng_from(stream_seed(seed, round, slot))
}

/// The per-component seeds of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Seeds {
    pub partition: u64,
    pub sampling: u64,
    pub batching: u64,
    pub codec: u64,
    pub network: u64,
    pub init: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            partition: derive_seed(master, "partition"),
            sampling: derive_seed(master, "sampling"),
            batching: derive_seed(master, "batching"),
            codec: derive_seed(master, "codec"),
            network: derive_seed(master, "network"),
            init: derive_seed(master, "init"),
        }
    }
}

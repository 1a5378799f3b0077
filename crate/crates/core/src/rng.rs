//! Seeded random streams.
//!
//! Every stochastic step of a simulation draws from its own stream, keyed by
//! `(master_seed, purpose, round, client_id)`. Streams are derived up front,
//! so the order in which parallel workers run cannot change any draw.
//!
//! The key is folded through the SplitMix64 finalizer one word at a time:
//!
//! ```text
//! h0 = mix(master_seed)
//! h1 = mix(h0 ^ purpose_tag)
//! h2 = mix(h1 ^ round)
//! h3 = mix(h2 ^ client_id)
//! ```
//!
//! and `h3` seeds a ChaCha8 generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    ModelInit,
    Partition,
    ClientSelection,
    LocalTraining,
    UploadNoise,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::ModelInit => 0x494e_4954,
            Stream::Partition => 0x5041_5254,
            Stream::ClientSelection => 0x5345_4c43,
            Stream::LocalTraining => 0x5452_4149,
            Stream::UploadNoise => 0x4e4f_4953,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master_seed: u64, stream: Stream, round: u64, client_id: u64) -> u64 {
    let h = mix64(master_seed);
    let h = mix64(h ^ stream.tag());
    let h = mix64(h ^ round);
    mix64(h ^ client_id)
}

pub fn stream(master_seed: u64, stream: Stream, round: u64, client_id: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master_seed, stream, round, client_id))
}

pub fn seeded(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

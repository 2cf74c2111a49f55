//! Deterministic seed derivation.
//!
//! Every random stream in a scenario is keyed off the master seed through
//! [`derive`], so runs are reproducible and independent streams never share
//! state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Partition = 3,
    QuasiValidation = 4,
    Init = 5,
    LocalTrain = 6,
    Attack = 7,
    Participation = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a parent seed with a stream tag and an index path.
pub fn derive(parent: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(parent ^ splitmix64(stream as u64));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

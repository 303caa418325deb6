//! Independently seeded random streams.
//!
//! Each consumer of randomness draws from its own stream, keyed by the run
//! seed, a stream tag and an epoch index. Changing how much randomness one
//! consumer uses therefore never shifts the draws seen by another, and a
//! resumed run reproduces the draws of an uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Shuffle,
    SsTransform,
    Attack,
    Init,
    Augment,
    Split,
    Corruption,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Shuffle => 1,
            Stream::SsTransform => 2,
            Stream::Attack => 3,
            Stream::Init => 4,
            Stream::Augment => 5,
            Stream::Split => 6,
            Stream::Corruption => 7,
            Stream::Eval => 8,
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derived 64-bit seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream.tag()) ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

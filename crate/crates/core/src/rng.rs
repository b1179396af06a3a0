//! Seeded random streams.
//!
//! Every stochastic operation takes its generator explicitly. A run seed is
//! expanded into independent ChaCha8 streams, one per purpose, so adding
//! draws to one stage never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type FlowRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Particles = 3,
    Band = 4,
    MonteCarlo = 5,
    Reference = 6,
}

pub fn stream(seed: u64, which: Stream) -> FlowRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Sub-stream `index` of a purpose stream, for chunked parallel sampling.
pub fn substream(seed: u64, which: Stream, index: u64) -> FlowRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((which as u64) << 32) | (index & 0xFFFF_FFFF));
    rng
}

//! Named, counter-based random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by the
//! global seed and a fixed stream id, so adding draws in one subsystem never
//! shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Data,
    Noise,
    Sampler,
    Policy,
    Probe,
    Eval,
    Generate,
    Profile,
    Dataset,
    HeldOut,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Noise => 3,
            Stream::Sampler => 4,
            Stream::Policy => 5,
            Stream::Probe => 6,
            Stream::Eval => 7,
            Stream::Generate => 8,
            Stream::Profile => 9,
            Stream::Dataset => 10,
            Stream::HeldOut => 11,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Sub-stream `index` of an event seed; used for per-timestep noise blocks.
pub fn substream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

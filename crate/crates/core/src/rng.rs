//! Seedable, splittable random streams.
//!
//! Each consumer of randomness in a run gets its own ChaCha stream derived
//! from the run seed, so adding draws in one place (say, flip sampling)
//! never shifts the sequence seen by another (say, batch shuffling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Split = 2,
    Noise = 3,
    Init = 4,
    Shuffle = 5,
    Flip = 6,
    Sharpness = 7,
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Derives a 64-bit sub-seed (used where an API takes a `u64` seed).
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    use rand::RngCore;
    self::stream(seed, stream).next_u64()
}

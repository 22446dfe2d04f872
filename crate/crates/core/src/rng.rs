//! Named, independently seeded random sub-streams.
//!
//! A single user seed fans out into one ChaCha stream per consumer so that
//! changing how much randomness one component draws never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Masking = 2,
    Shuffle = 3,
    Lora = 4,
    HeadInit = 5,
    Extend = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

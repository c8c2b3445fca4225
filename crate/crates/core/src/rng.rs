//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream keyed by (seed, purpose, index), so results do not depend on
//! the order in which clients are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthetic = 1,
    Partition = 2,
    LshBasis = 3,
    ClientInit = 4,
    Client = 5,
    Salt = 6,
    Adversary = 7,
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

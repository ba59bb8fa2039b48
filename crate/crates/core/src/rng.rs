//! Seeded generators. Every random draw in the crate comes from a
//! generator derived here from an explicit seed; nothing is global.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams used within one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Sample = 2,
    Batch = 3,
    Dropout = 4,
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `(seed, epoch, stream)`; depends on nothing else, so an
/// epoch replayed after a resume draws exactly the same numbers.
pub fn epoch_rng(seed: u64, epoch: usize, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16] = stream as u8;
    ChaCha8Rng::from_seed(key)
}

//! Seeded generator streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived
//! from the run seed, so enabling or disabling one component never shifts
//! the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Split = 2,
    Init = 3,
    Batches = 4,
    Mixup = 5,
    QueueFill = 6,
    Augment = 7,
}

/// Generator for `stream`, sub-indexed by `index` (epoch, refresh count, ...).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

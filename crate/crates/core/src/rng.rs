//! Derived random streams.
//!
//! Every stochastic draw in a run is taken from a generator seeded by
//! `(run seed, purpose, step, index)`, so any step can be replayed without
//! carrying generator state across checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    LabeledOrder = 2,
    UnlabeledOrder = 3,
    WeakAugment = 4,
    StrongAugment = 5,
    Dropout = 6,
    Split = 7,
    Blobs = 8,
    LabeledAugment = 9,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, step: u64, index: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ step);
    splitmix(h ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, step: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, step, index))
}

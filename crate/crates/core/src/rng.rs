//! Seeded random streams.
//!
//! Every stream is ChaCha8 keyed by `seed_from_u64(seed)` and positioned on
//! a 64-bit stream id. ChaCha is counter based, so a `(seed, stream)` pair
//! names the same sequence in any implementation of the cipher. Stream ids
//! are built from a purpose tag in the high 16 bits and an index below it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for stream ids.
#[derive(Clone, Copy, Debug)]
#[repr(u16)]
pub enum Purpose {
    Grid = 1,
    Prototypes = 2,
    Shift = 3,
    ModelInit = 4,
    DiscriminatorInit = 5,
    Sampler = 6,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

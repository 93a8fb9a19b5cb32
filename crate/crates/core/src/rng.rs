//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by a
//! master seed plus a purpose tag and an index, so results do not depend on
//! the order (or thread) in which independent pieces of work run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes; keeps e.g. simulation 3 of the training set and batch 3
/// of epoch 0 from sharing a stream.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Purpose {
    Simulation = 1,
    Init = 2,
    Shuffle = 3,
    Gumbel = 4,
    Eval = 5,
    TestSet = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of indices.
pub fn derive_seed(seed: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ splitmix64(purpose as u64));
    for &i in indices {
        s = splitmix64(s ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    s
}

pub fn stream(seed: u64, purpose: Purpose, indices: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, indices))
}

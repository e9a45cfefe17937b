//! Deterministic random streams and stateless stream splitting.
//!
//! All randomness in this crate flows through [`RandomStream`], a ChaCha
//! generator with a stable cross-platform output sequence. Child streams for
//! parallel work are derived by hashing `(master seed, indices...)` so that
//! serial and parallel execution of the same experiment consume identical
//! random sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomStream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless split: maps a master seed and an index path to a child seed.
pub fn split_seed(master: u64, indices: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &ix in indices {
        state = splitmix64(state ^ splitmix64(ix.wrapping_add(0xA5A5_A5A5_A5A5_A5A5)));
    }
    state
}

pub fn stream(seed: u64) -> RandomStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child stream at an index path below a master seed.
pub fn substream(master: u64, indices: &[u64]) -> RandomStream {
    stream(split_seed(master, indices))
}

//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 generator keyed by
//! `(master seed, stream)` and positioned on a 64-bit substream index, so a
//! replicate can be regenerated in isolation and parallel schedules cannot
//! change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named stream families. The discriminants are part of the reproducibility
/// contract and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Population = 1,
    Assignment = 2,
    Permutation = 3,
    RefDist = 4,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for substream `index` of `stream` under `seed`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> StreamRng {
    let key = splitmix64(seed ^ splitmix64(stream as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Mixes two words into a fresh seed; used to derive nested seeds such as a
/// replicate's permutation seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

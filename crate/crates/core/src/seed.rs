//! Seed derivation so every random stream in a run is a pure function of the
//! experiment seed and a handful of coordinates (peer, round, epoch, ...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix `base` with an ordered list of coordinates into a new seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

// Stream tags keep otherwise-equal coordinate tuples from colliding.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_SHUFFLE: u64 = 2;
pub(crate) const STREAM_ORDER: u64 = 3;
pub(crate) const STREAM_DP: u64 = 4;
pub(crate) const STREAM_PARTITION: u64 = 5;
pub(crate) const STREAM_SYNTH: u64 = 6;

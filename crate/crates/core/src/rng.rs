//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] derived from the
//! run seed. Independent consumers (data generation, cropping, noise, weight
//! init) use distinct stream ids so adding draws to one never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Well-known stream ids.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const GENERATOR: u64 = 6;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child stream keyed by an index (e.g. a domain or a patch number).
pub fn child(seed: u64, stream: u64, index: u64) -> Rng {
    let mixed = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    seeded(mixed, stream)
}

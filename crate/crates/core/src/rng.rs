//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by `mix64(master, index)`, so any sample or batch can be regenerated
//! from its index alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer applied to `seed + (i + 1) * golden`.
pub fn mix64(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `i` of `seed`.
pub fn stream(seed: u64, i: u64) -> Rng {
    rng_from_seed(mix64(seed, i))
}

/// Domain tags keep streams for different purposes apart under one seed.
pub mod tag {
    pub const BANK: u64 = 0x6261_6e6b;
    pub const SYNTH: u64 = 0x7379_6e74;
    pub const COND: u64 = 0x636f_6e64;
    pub const INIT: u64 = 0x696e_6974;
    pub const HEAD: u64 = 0x6865_6164;
    pub const ORDER: u64 = 0x6f72_6472;
    pub const SPLIT: u64 = 0x7370_6c74;
    pub const BENCH: u64 = 0x6265_6e63;
}

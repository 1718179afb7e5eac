//! Seed derivation. Every random stream is keyed by `(seed, purpose, index)` so
//! results do not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(purpose)) ^ index)
}

pub fn rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, purpose, index))
}

// Stream identifiers.
pub const FACTORS: u64 = 1;
pub const SPLIT: u64 = 2;
pub const INIT: u64 = 3;
pub const SHUFFLE: u64 = 4;
pub const SELECT: u64 = 5;
pub const RECTIFY: u64 = 6;
pub const GROUPS: u64 = 7;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ() {
        assert_ne!(derive(1, FACTORS, 0), derive(1, FACTORS, 1));
        assert_ne!(derive(1, FACTORS, 0), derive(1, SPLIT, 0));
        assert_ne!(derive(1, FACTORS, 0), derive(2, FACTORS, 0));
        assert_eq!(derive(9, SELECT, 4), derive(9, SELECT, 4));
    }
}

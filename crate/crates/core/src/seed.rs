//! Seed derivation shared by every pipeline.
//!
//! Each item's stream is `run_seed ^ fnv1a64(item_id)`, so an item gets the
//! same randomness whether it is processed alone, serially or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn item_seed(run_seed: u64, item_id: &str) -> u64 {
    run_seed ^ fnv1a64(item_id.as_bytes())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

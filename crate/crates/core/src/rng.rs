//! Seed derivation. Every random stream in the crate is keyed off one root
//! seed plus a component name and an index, so components never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `(root, component, index)` into a sub-seed.
pub fn derive_seed(root: u64, component: &str, index: u64) -> u64 {
    // FNV-1a over the component name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(splitmix64(root ^ h) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(root: u64, component: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, component, index))
}

//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded with the
//! run's master seed and placed on a stream selected by hashing a component
//! name (FNV-1a, 64 bit). Two components never share a stream, and a
//! component's draws do not depend on how many draws other components made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a over the UTF-8 bytes of `name`.
pub fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for the component `name` under `seed`.
pub fn component_rng(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// A derived 64-bit seed, used when a component needs to hand seeds to children.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    // splitmix64 finalizer over the xor of seed and name hash
    let mut z = seed ^ fnv1a(name);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Seed expansion.
//!
//! One root seed is expanded into named, indexed streams. Each stream is a
//! Xoshiro256++ generator whose 256-bit state is filled by SplitMix64 from a
//! 64-bit key derived from `(seed, name, index)`. Streams with different keys
//! share no state.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Generator for stream `name`/`index` under the root `seed`.
pub fn stream(seed: u64, name: &str, index: u64) -> Rng {
    let key = splitmix64(splitmix64(seed ^ fnv1a(name)).wrapping_add(index));
    Xoshiro256PlusPlus::seed_from_u64(key)
}

/// Derive a child seed, for handing a sub-computation its own root seed.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(name)) ^ splitmix64(index.wrapping_add(1)))
}

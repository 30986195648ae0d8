//! Seeded random streams.
//!
//! Every stochastic component receives its own ChaCha8 stream. Stream seeds are
//! derived from the run seed and a component name:
//!
//! `derive_seed(seed, name) = splitmix64(fnv1a64(seed.to_le_bytes() ++ name))`
//!
//! so adding a new component never perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit stream seed from a run seed and a component name.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// A generator seeded directly from a 64-bit value.
pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A generator for the named component of a run.
pub fn stream(seed: u64, name: &str) -> Rng {
    rng_from_seed(derive_seed(seed, name))
}

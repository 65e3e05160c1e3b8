//! Seeding helpers. Every random draw in the crate goes through a PCG
//! generator seeded from a `u64`, so results are reproducible per seed.

use rand::SeedableRng;
use rand_pcg::Pcg64;

/// Generator used throughout the crate.
pub type Rng = Pcg64;

pub fn rng_from_seed(seed: u64) -> Rng {
    Pcg64::seed_from_u64(seed)
}

/// Derives an independent child seed from `seed` and a textual tag.
///
/// The tag is hashed with FNV-1a and combined with the parent seed through a
/// splitmix64 finalizer.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Deterministic randomness plumbing.
//!
//! Every stochastic routine in the crate draws from a [`Prng`] seeded through
//! [`derive_rng`]. Parallel work (chains, datapoints) derives one generator
//! per task up front, so results depend only on (seed, task count), never on
//! thread scheduling.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

/// The crate-wide generator. ChaCha gives identical streams on every platform.
pub type Prng = rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over the tag bytes, so distinct purposes get distinct streams.
fn hash_tag(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives an independent generator for one task of one purpose.
pub fn derive_rng(master_seed: u64, tag: &str, index: u64) -> Prng {
    let mixed = splitmix64(master_seed ^ splitmix64(hash_tag(tag) ^ splitmix64(index)));
    Prng::seed_from_u64(mixed)
}

/// One standard-normal draw.
pub fn standard_normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

/// Fills a vector with standard-normal draws.
pub fn standard_normal_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

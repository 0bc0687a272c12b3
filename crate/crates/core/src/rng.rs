//! Seed derivation. Every run owns a single master seed; all random streams
//! are derived from it so that reruns are bitwise identical.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// splitmix64 finalizer; decorrelates nearby seeds and tags.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix three values into one seed (used for matched per-sample seeds).
pub fn mix3(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(seed, a), b)
}

/// A deterministic stream for `seed` and a stream tag.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// Draw a standard-normal vector of length `dim`.
pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

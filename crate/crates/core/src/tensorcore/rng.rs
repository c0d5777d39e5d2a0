use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

/// The single generator type used for every stochastic operation.
pub type Rng = rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream derived from `(seed, stream)` so that, e.g., each
/// expert or episode gets its own generator regardless of evaluation order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // one splitmix64 finalizer round over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng, std)).collect()
}

//! Keyed deterministic random streams and weight initializers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{lit, Element, Tensor};

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a purpose tag and integer keys into a sub-seed.
pub fn derive_seed(seed: u64, tag: &str, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    for &k in keys {
        h = splitmix(h ^ k);
    }
    h
}

/// Independent stream for `(seed, tag, keys)`.
pub fn stream(seed: u64, tag: &str, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tag, keys))
}

pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        lit(z * std)
    })
}

/// Normal draws resampled until they fall within two standard deviations.
pub fn trunc_normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break lit(z * std);
        }
    })
}

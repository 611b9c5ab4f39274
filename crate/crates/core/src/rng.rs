//! Seeded randomness. Every stochastic step takes an explicit seed so runs are
//! reproducible and independent streams never share state.

use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix `(seed, stream, index)` into a fresh seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard-normal tensor determined only by `(seed, stream, index)`.
pub fn noise<T: Scalar>(seed: u64, stream: u64, index: u64, shape: &[usize]) -> Tensor<T> {
    Tensor::randn(shape, &mut seeded(derive_seed(seed, stream, index)))
}

//! Shared fixtures for the criterion benches.

use flocora::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform tensor in `[-1, 1]` from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}

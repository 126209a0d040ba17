//! Shared fixtures for the kernel benchmarks.

use agewave_core::rng::Rng;
use agewave_core::Tensor;

pub fn random_image(n: usize, c: usize, hw: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::rand_uniform(&[n, c, hw, hw], -1.0, 1.0, &mut rng)
}

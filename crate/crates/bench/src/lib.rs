//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sde_core::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Strictly negative poles `[D, H]`.
pub fn poles(d: usize, h: usize) -> Tensor {
    Tensor::new(vec![d, h], (0..d).flat_map(|_| (1..=h).map(|j| -(j as f64))).collect()).expect("shape matches data")
}

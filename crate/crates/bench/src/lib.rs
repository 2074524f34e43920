//! Seeded inputs shared by the benchmarks.

use hyperpc::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[rows, cols]` matrix with entries uniform in `[-1, 1)`.
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// `n` points in the unit cube.
pub fn cloud(n: usize, seed: u64) -> Tensor {
    uniform(n, 3, seed)
}

//! Seeded inputs shared by the benchmarks.

use mivolo_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normalized-looking `[3, side, side]` crop.
pub fn image(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    let data = (0..side * side * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(vec![3, side, side], data).expect("matching length")
}

pub fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn cost_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..100.0)).collect()).collect()
}

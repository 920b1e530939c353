//! Inputs shared by the benchmarks in `benches/`.

use plp_core::vector::{normalize, EmbeddingVector};
use rand::rngs::ChaCha8Rng;
use rand::SeedableRng;
use rand::RngExt;
use rand_distr::StandardNormal;

/// `n` rows of `d` standard normals and a noisy linear target.
pub fn regression_system(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let y = x
        .iter()
        .map(|r| {
            let noise: f64 = rng.sample(StandardNormal);
            0.5 + 0.05 * r.iter().sum::<f64>() + 0.01 * noise
        })
        .collect();
    (x, y)
}

/// `count` random unit vectors of dimension `dim`.
pub fn unit_vectors(count: usize, dim: usize, seed: u64) -> Vec<EmbeddingVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&v).expect("gaussian vector is non-zero")
        })
        .collect()
}

//! Seeded fixtures shared by the benchmarks.

use msfanet::nn::attention::swin_param_shapes;
use msfanet::nn::{AttentionSpec, FeatureGrid, SwinBlockWeights, Tokens};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn grid(channels: usize, height: usize, width: usize, seed: u64) -> FeatureGrid {
    FeatureGrid::from_vec(channels, height, width, 1, uniform(channels * height * width, seed)).unwrap()
}

pub fn tokens(rows: usize, cols: usize, seed: u64) -> Tokens {
    let mut t = Tokens::zeros(rows, cols);
    t.data = uniform(rows * cols, seed);
    t
}

/// Random weights for one transformer block with the given geometry.
pub fn swin_weights(spec: &AttentionSpec, mlp_ratio: usize, seed: u64) -> SwinBlockWeights {
    let shapes = swin_param_shapes(spec.dim, spec.heads, spec.window, spec.dim * mlp_ratio);
    let parts = shapes
        .iter()
        .enumerate()
        .map(|(i, (_, shape))| {
            let n = shape.iter().product();
            uniform(n, seed + i as u64).into_iter().map(|v| v * 0.1).collect()
        })
        .collect();
    SwinBlockWeights::from_parts(parts)
}

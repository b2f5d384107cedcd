//! Shared inputs for the criterion benchmarks.

use nsa_core::nets::ArchConfig;
use nsa_core::ssl::TrainConfig;
use nsa_core::{EmbeddingSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| r.random_range(-1.0f32..1.0) + 0.3).collect();
    EmbeddingSet::new(n, d, data).expect("valid shape")
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0))
}

/// The benchmark-sized backbone on 16px inputs.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            in_channels: 3,
            widths: [8, 16, 32, 64],
            proj_dim: 64,
            pred_hidden: 32,
        },
        batch_size: 64,
        epochs: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

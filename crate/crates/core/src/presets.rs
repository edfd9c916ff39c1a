//! Ready-made desk-scale experiments.

use crate::accordion::AccordionConfig;
use crate::compressor::Level;
use crate::model::{gen_least_squares, gen_two_gaussian, Dataset, Model};
use crate::simulator::{Policy, TrainConfig};

pub const CANONICAL_DIM: usize = 20;
pub const CANONICAL_HIDDEN: usize = 16;
pub const CANONICAL_SAMPLES: usize = 4096;
pub const CANONICAL_SIGMA: f64 = 1.0;
pub const CANONICAL_MU_NONZEROS: usize = 5;
pub const CANONICAL_MU_SCALE: f64 = 0.5;

/// Class mean with `nonzeros` leading entries equal to `scale`.
pub fn sparse_mean(dim: usize, nonzeros: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|j| if j < nonzeros { scale } else { 0.0 }).collect()
}

pub fn canonical_accordion() -> AccordionConfig {
    AccordionConfig {
        period_epochs: 3,
        ..AccordionConfig::compression(Level::PowerSgd { rank: 2 }, Level::PowerSgd { rank: 1 })
    }
}

/// 4 workers, 30 epochs, warmup 5, decays at 15 and 25, rank 2 / rank 1.
pub fn canonical_train_config(policy: Policy, seed: u64) -> TrainConfig {
    TrainConfig {
        lr_reference_batch: Some(32),
        decay_epochs: vec![15, 25],
        seed,
        ..TrainConfig::new(4, 30, 32, 0.05, policy)
    }
}

/// Tanh MLP on two-Gaussian data with an Accordion schedule.
pub fn canonical_desk_run(seed: u64) -> (TrainConfig, Model, Dataset) {
    let mu = sparse_mean(CANONICAL_DIM, CANONICAL_MU_NONZEROS, CANONICAL_MU_SCALE);
    let data =
        gen_two_gaussian(&mu, CANONICAL_SIGMA, CANONICAL_SAMPLES, seed).expect("canonical data parameters are valid");
    let model = Model::mlp(CANONICAL_DIM, CANONICAL_HIDDEN, seed);
    let config = canonical_train_config(Policy::Accordion(canonical_accordion()), seed);
    (config, model, data)
}

/// Least-squares regression (d=50, n=4096, 4 workers, 30 epochs).
pub fn least_squares_run(policy: Policy, seed: u64) -> (TrainConfig, Model, Dataset) {
    let (data, _) = gen_least_squares(50, 4096, 0.1, seed);
    let config = TrainConfig {
        lr_reference_batch: Some(32),
        decay_epochs: vec![15, 25],
        seed,
        ..TrainConfig::new(4, 30, 32, 0.01, policy)
    };
    (config, Model::least_squares(50), data)
}

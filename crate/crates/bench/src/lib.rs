//! Shared fixtures for the benchmarks.

use dpadam_core::models::{make_synthetic, Dataset, SyntheticSpec};
use dpadam_core::{Model, PrivacyConfig};

pub fn logistic_fixture(n: usize, d: usize) -> (Model, Dataset) {
    let data = make_synthetic(&SyntheticSpec::classification(n, d, 1, 0.0)).expect("valid spec");
    (Model::logistic_regression(d, 2).expect("valid model"), data)
}

pub fn privacy(batch_size: usize, dataset_size: usize) -> PrivacyConfig {
    PrivacyConfig {
        clip_norm: 1.0,
        noise_multiplier: 1.0,
        batch_size,
        dataset_size,
        delta: 1e-5,
        target_epsilon: 7.0,
    }
}

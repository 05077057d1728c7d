//! Shared fixtures for the benchmarks.

use fvl_core::data::GroupedDataset;
use fvl_core::experiment::ExperimentConfig;
use fvl_core::gaussian::DiagGaussian;
use fvl_core::{Tensor, Variant};

/// Deterministic dense matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, salt: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i * 7919 + salt * 104_729) % 2003) as f64 / 1001.5 - 1.0)
        .collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}

pub fn gaussian(dim: usize, shift: f64) -> DiagGaussian {
    let mu = (0..dim).map(|j| (j as f64 * 0.37 + shift).sin() * 2.0).collect();
    let log_var = (0..dim).map(|j| (j as f64 * 0.11 - shift).cos()).collect();
    DiagGaussian::new(mu, log_var).expect("finite parameters")
}

/// The default experiment with `variant`, and its generated splits.
pub fn experiment(variant: Variant) -> (ExperimentConfig, GroupedDataset, GroupedDataset) {
    let cfg = ExperimentConfig::default().with_variant(variant);
    let (train, test) = cfg.generate_data().expect("default dataset is valid");
    (cfg, train, test)
}

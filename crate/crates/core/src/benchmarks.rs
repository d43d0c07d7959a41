//! Small synthetic benchmarks used by the property checks and the test suite.

use crate::datagen::{gen_gaussian_mixture, Covariance, Dataset, DatasetSpec};
use crate::difficulty::{ErrorEstimatorConfig, EstimatorMode};
use crate::error::{LabError, Result};
use crate::models::{LossKind, LossSpec, ModelFamily};
use crate::optimizer::Hyper;
use crate::maxmargin::solve_max_margin;
use crate::seed::derive_seed;

/// Attempts made by [`separable_linear`] before giving up.
pub const SEPARABLE_ATTEMPTS: u64 = 64;

/// Two anisotropic Gaussian classes, 50 samples each, in two dimensions,
/// placed so that a line through the origin usually separates them. The
/// class-mean direction is far from the max-margin direction, so gradient
/// descent has to rotate toward it.
pub fn separable_linear_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        class_means: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
        class_covariances: vec![
            Covariance::Diagonal(vec![0.05, 1.0]),
            Covariance::Diagonal(vec![0.05, 1.0]),
        ],
        class_counts: vec![50, 50],
        seed,
    }
}

/// [`separable_linear_spec`] with the first seed derived from `seed` whose
/// draw is linearly separable through the origin.
pub fn separable_linear(seed: u64) -> Result<Dataset> {
    for attempt in 0..SEPARABLE_ATTEMPTS {
        let ds = gen_gaussian_mixture(&separable_linear_spec(derive_seed(seed, &[attempt])))?;
        match solve_max_margin(&ds) {
            Ok(_) => return Ok(ds),
            Err(LabError::NotSeparable) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(LabError::NotSeparable)
}

/// The points `(1, 1)` labelled `+1` and `(−1, −1)` labelled `−1`.
pub fn two_point() -> Dataset {
    Dataset::new(
        ndarray::array![[-1.0, -1.0], [1.0, 1.0]],
        vec![-1, 1],
        vec![false; 2],
        vec![0, 1],
        2,
    )
    .expect("valid two-point dataset")
}

/// Two overlapping isotropic classes, 200 samples each, in two dimensions.
pub fn standard_binary_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        class_means: vec![vec![-1.0, -1.0], vec![1.0, 1.0]],
        class_covariances: vec![Covariance::Isotropic(1.0), Covariance::Isotropic(1.0)],
        class_counts: vec![200, 200],
        seed,
    }
}

/// Profile estimator used with [`standard_binary_spec`]: zero-initialized
/// linear model, logistic loss, 100 epochs, 30 perturbed-feature repeats.
pub fn standard_estimator(seed: u64) -> ErrorEstimatorConfig {
    let mut family = ModelFamily::linear();
    family.init_scale = 0.0;
    let mut cfg = ErrorEstimatorConfig::new(family, LossSpec::new(LossKind::Logistic), Hyper::new(100), seed);
    cfg.repeats = 30;
    cfg.mode = EstimatorMode::Perturb;
    cfg
}

/// Profile estimator used with [`imbalanced_spec`]: zero-initialized linear
/// model, logistic loss, 300 epochs, 20 repeats of 5-fold resampling.
pub fn imbalance_estimator(seed: u64) -> ErrorEstimatorConfig {
    let mut family = ModelFamily::linear();
    family.init_scale = 0.0;
    ErrorEstimatorConfig::new(family, LossSpec::new(LossKind::Logistic), Hyper::new(300), seed)
}

/// Two-class set with `large` samples in class 0 and `large / ratio` in
/// class 1. The second coordinate is near 1 for every sample, so it plays the
/// role of an intercept for bias-free models.
pub fn imbalanced_spec(seed: u64, large: usize, ratio: f64) -> DatasetSpec {
    let small = ((large as f64 / ratio).round() as usize).max(1);
    DatasetSpec {
        class_means: vec![vec![-0.5, 1.0], vec![0.5, 1.0]],
        class_covariances: vec![
            Covariance::Diagonal(vec![0.25, 0.01]),
            Covariance::Diagonal(vec![0.25, 0.01]),
        ],
        class_counts: vec![large, small],
        seed,
    }
}

//! Difficulty-based sample weighting laboratory.
//!
//! The crate estimates a per-sample generalization error by repeated
//! cross-validated training, uses it (or cheaper proxies) to weight full-batch
//! gradient descent, and evaluates convergence and generalization-bound
//! diagnostics on small synthetic problems.
//!
//! Module map:
//!
//! - [`datagen`]: seeded Gaussian mixtures, label/feature corruption, fold plans.
//! - [`models`]: bias-free linear and two-layer ReLU predictors, losses, gradients.
//! - [`optimizer`]: weighting schemes and weighted gradient descent.
//! - [`maxmargin`]: hard-margin reference direction for separable data.
//! - [`difficulty`]: per-sample error, bias/variance, margin statistics.
//! - [`bounds`]: weighted generalization bound terms.
//! - [`propcheck`]: empirical validators returning structured verdicts.
//! - [`labcli`]: experiment configs, manifests and reports behind the `lab` binary.

// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod benchmarks;
pub mod bounds;
pub mod datagen;
pub mod difficulty;
pub mod error;
pub mod labcli;
pub mod maxmargin;
pub mod models;
pub mod optimizer;
pub mod propcheck;
pub mod seed;
pub mod stats;

pub use error::{LabError, Result};

/// Version of every artifact schema this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

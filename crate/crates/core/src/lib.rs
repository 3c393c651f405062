//! Multi-model similarity-score fusion for biometric identification.
//!
//! The crate covers the full loop from score matrices to a trained selection
//! policy:
//!
//! - [`dataset`]: per-model query x gallery similarity matrices, labels,
//!   optional query features, file ingestion and validation.
//! - [`fusion`]: anchored confidence top-k fusion and rule-based baselines.
//! - [`metrics`]: Rank-1, mAP, TAR@FAR, FNIR@FPIR over seeded non-mated
//!   trials, and the composite overall score.
//! - [`reward`]: trajectory rewards (format, tool success, accuracy, metric
//!   based) and the gamma-augmented selection mask.
//! - [`selector`]: candidate enumeration, dataset-level grid search, and the
//!   per-sample oracle.
//! - [`policy`]: a parametric selection policy trained with group-relative
//!   policy optimization.
//! - [`synth`]: seeded synthetic dataset generation with per-model
//!   reliability gated on query attributes.
//! - [`experiment`]: config-driven experiment runner behind the CLI.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod selector;
pub mod synth;

mod util;

pub use error::{Error, Result};

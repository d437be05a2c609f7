//! Doubly robust estimation of potential outcome means and average treatment
//! effects in the population of all trial-eligible individuals, for trials
//! nested in a cohort where the expensive covariates of non-randomized
//! individuals are only collected on a probability sub-sample.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: the cohort dataset with its monotone missingness pattern.
//! - [`glm`]: weighted linear and logistic regression (the only optimiser).
//! - [`nuisance`]: the sampling, treatment, participation, outcome and
//!   pseudo-outcome models the estimator needs.
//! - [`estimator`]: the one-step estimator, influence curves, bootstrap and
//!   plug-in variance decomposition.
//! - [`analysis`]: JSON analysis configuration and the end-to-end driver used
//!   by the command-line tool.
//! - [`sim`]: the Monte Carlo harness (data generation, intercept calibration,
//!   replicate grids and metric tables).

pub mod analysis;
pub mod data;
pub mod estimator;
pub mod glm;
mod linalg;
pub mod nuisance;
pub mod rng;
pub mod sim;
mod stats;

use thiserror::Error;

pub use analysis::{AnalysisConfig, EstimateResult};
pub use data::{CohortDataset, ColumnSpec, SubsamplingDesign};
pub use glm::{DesignSpec, Family, FittedGlm};
pub use nuisance::{NuisanceSet, NuisanceSpec};

/// Crate-level error, wrapping the per-module errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Glm(#[from] glm::GlmError),
    #[error(transparent)]
    Nuisance(#[from] nuisance::NuisanceError),
    #[error(transparent)]
    Estimate(#[from] estimator::EstimateError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Config(#[from] analysis::ConfigError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

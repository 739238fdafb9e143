//! Hierarchical mixture-of-Gaussian-processes model for individualized
//! prediction of clinical-marker trajectories.
//!
//! A marker observation is modeled as the sum of four components: a
//! population term driven by baseline covariates, a latent-subtype
//! B-spline trajectory, an individual random-effect adjustment, and a
//! mean-reverting structured-noise Gaussian process with an
//! Ornstein-Uhlenbeck kernel. Population and subtype parameters are
//! learned offline by EM; individual-level quantities are inferred online
//! by Bayesian updating as an individual's history grows.
//!
//! The crate also ships an exact sampler from the generative model, the
//! three comparison baselines, and the dynamic-prediction evaluation
//! harness (cutoffs, time-binned MAE against smoothed trajectories,
//! individual-level cross-validation, paired significance tests, and
//! decline-detection rates).

pub mod basis;
pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod files;
pub mod kernels;
pub mod learning;
pub mod model;
pub mod prediction;
pub mod simulate;

pub use error::{Error, Result};

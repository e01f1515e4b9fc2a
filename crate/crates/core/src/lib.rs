//! Bayesian joint modelling of bi-exponential longitudinal biomarkers and a
//! multinomial categorical outcome linked through shared patient-level latent
//! characteristics.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: CSV ingestion, covariate treatment, the immutable [`data::Cohort`].
//! - [`biexp`]: bi-exponential trajectories, longitudinal likelihood, IWRES.
//! - [`categorical`]: multinomial-logit probabilities, likelihood, relative risks.
//! - [`posterior`]: the joint log posterior over an unconstrained vector, with
//!   analytic gradients and the constrained/unconstrained bijection.
//! - [`sampler`]: multinomial NUTS with warm-up adaptation, R-hat and ESS.
//! - [`fitted`]: per-draw views of a fit used by evaluation and prediction.
//! - [`evaluation`]: WAIC, confusion matrices, class-weighted metrics.
//! - [`importance`]: permutation variable importance.
//! - [`simulate`]: synthetic cohorts from the generative model.

pub mod biexp;
pub mod categorical;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fitted;
pub mod importance;
pub mod initial;
pub mod linalg;
pub mod posterior;
pub mod sampler;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};

/// Number of modelled biomarkers (M-spike and FLC in the motivating study).
pub const NUM_BIOMARKERS: usize = 2;

/// Number of latent characteristics per biomarker: log baseline, log growth
/// rate and log decay rate.
pub const NUM_CHARACTERISTICS: usize = 3;

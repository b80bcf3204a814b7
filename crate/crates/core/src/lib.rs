//! Sparse variational Gaussian process regression with robust noise models.
//!
//! The centerpiece is a contaminated-normal (CN) observation model: a
//! two-component Gaussian mixture sharing its mean, where one component's
//! variance is inflated by a factor `tau` and the mixture weight `pi` is the
//! outlier proportion. Inference runs on an inducing-point variational
//! posterior and maximizes an evidence lower bound with a stochastic
//! alternating scheme: responsibilities and variational parameters move in a
//! forward step, model and kernel hyperparameters in a backward step (either
//! closed-form mixture updates or Adam steps).
//!
//! Gaussian, Student-t, and Laplace noise models are provided as baselines,
//! together with an exact dense GP (small-instance reference), simulation
//! generators, evaluation metrics, and dataset utilities.

pub mod data;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod likelihoods;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod variational;

pub use error::{Error, Result};

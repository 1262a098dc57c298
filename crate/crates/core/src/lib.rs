//! Bayesian orthogonal-Tucker longitudinal mixed models for multi-group
//! tensor time series, fitted by blocked Gibbs sampling.

pub mod bases;
pub mod config;
pub mod container;
pub mod data;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod ltf;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod priors;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};

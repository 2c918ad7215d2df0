//! Stochastic variational training of the flow model.

mod config;
mod elbo;
mod fit;
mod init;

pub use config::{OptimizerConfig, TraceRecord};
pub use elbo::{elbo, elbo_grad, elbo_grad_with_noise, elbo_terms, ElboTerms, PathNoise};
pub use fit::{fit, validation_noise};
pub use init::init_model;

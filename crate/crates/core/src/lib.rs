//! Monotonic regression with Gaussian-process-driven SDE flows.
//!
//! A sparse GP over (space, time) defines the drift and diffusion of an SDE. Inputs are
//! pushed through the flow jointly, so every coherent draw maps sorted inputs to sorted
//! outputs. [`train::fit`] learns the flow by stochastic variational inference and
//! [`bench`] reproduces the standard monotone-regression benchmark protocol.

pub mod bench;
pub mod data;
pub mod error;
pub mod flow;
pub mod gp;
pub mod optim;
pub mod rng;
pub mod train;

pub use data::{Dataset, DatasetMeta};
pub use error::{Error, Result};

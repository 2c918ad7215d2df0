//! The monotonic flow: an SDE whose drift and diffusion are the sparse posterior of a GP
//! over (space, time), solved with jointly sampled Euler–Maruyama increments.

pub(crate) mod field;
mod model;
mod sample;

pub use field::{euler_maruyama_step, flow_field, ParticleState};
pub use model::{DiffusionMode, FlowGradient, FlowModel, DEFAULT_STEPS};
pub use sample::{ordering_violations, predict, replay, sample_flow, streamlines, FlowSample, Prediction};

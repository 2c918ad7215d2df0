use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stochastic-gradient settings shared by the flow and the exact-GP baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Iterations without a validation improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub decay_factor: f64,
    pub n_elbo_samples: usize,
    pub seed: u64,
    /// Validation objective is evaluated every this many iterations.
    pub validate_every: usize,
    pub validation_samples: usize,
    /// Training stops once the learning rate falls below this.
    pub min_learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            max_iters: 10_000,
            plateau_patience: 500,
            decay_factor: 1.0 / 10f64.sqrt(),
            n_elbo_samples: 3,
            seed: 0,
            validate_every: 10,
            validation_samples: 8,
            min_learning_rate: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid("decay factor must lie in (0, 1)"));
        }
        if self.n_elbo_samples == 0 || self.validation_samples == 0 {
            return Err(Error::invalid("sample counts must be at least 1"));
        }
        if self.validate_every == 0 {
            return Err(Error::invalid("validate_every must be at least 1"));
        }
        Ok(())
    }
}

/// Per-iteration optimization history.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Training objective estimate per iteration (NaN where the step was skipped).
    pub elbo: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Seconds since the start of training.
    pub wall_time: Vec<f64>,
    /// `(iterations completed, validation objective)` checkpoints.
    pub validation: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub best_validation: f64,
}

impl TraceRecord {
    pub fn iterations(&self) -> usize {
        self.elbo.len()
    }

    pub fn final_learning_rate(&self) -> Option<f64> {
        self.learning_rate.last().copied()
    }
}

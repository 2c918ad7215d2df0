use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{KernelGrad, KernelParams, Point};

/// Euler–Maruyama steps used when nothing else is specified.
pub const DEFAULT_STEPS: usize = 20;

/// How the diffusion term enters each solver step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffusionMode {
    /// One coherent field draw per step: increments use the Cholesky factor of the full
    /// posterior covariance across all particles.
    #[default]
    Joint,
    /// Each particle gets its own marginal noise. Does NOT preserve ordering; kept as a
    /// diagnostic for comparing against the joint mode.
    Independent,
    /// No diffusion; the flow is an ODE driven by the posterior mean.
    Off,
}

/// The learnable state of a monotonic flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub kernel: KernelParams,
    /// Inducing inputs `[space, time]`; time coordinates lie in `[0, flow_time]`.
    pub inducing: Vec<Point>,
    /// Variational mean of the inducing outputs.
    pub q_mean: DVector<f64>,
    /// Lower-triangular factor of the variational covariance, positive diagonal.
    pub q_factor: DMatrix<f64>,
    pub noise_variance: f64,
    pub flow_time: f64,
    pub n_steps: usize,
    pub diffusion: DiffusionMode,
    /// Seed recorded at initialization; not used by any computation.
    pub seed: u64,
}

/// Gradient of a scalar objective with respect to every free parameter of a [`FlowModel`].
///
/// `q_factor` holds derivatives for the strictly-lower entries and, on the diagonal,
/// derivatives with respect to the log of the diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGradient {
    pub q_mean: DVector<f64>,
    pub q_factor: DMatrix<f64>,
    pub inducing: Vec<Point>,
    pub kernel: KernelGrad,
    pub log_noise_variance: f64,
}

impl FlowGradient {
    pub fn zeros(m: usize) -> Self {
        FlowGradient {
            q_mean: DVector::zeros(m),
            q_factor: DMatrix::zeros(m, m),
            inducing: vec![[0.0; 2]; m],
            kernel: KernelGrad::default(),
            log_noise_variance: 0.0,
        }
    }

    /// Flattened in the same order as [`FlowModel::free_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let m = self.q_mean.len();
        let mut out = Vec::with_capacity(free_len(m));
        out.extend_from_slice(self.q_mean.as_slice());
        for j in 0..m {
            for i in j..m {
                out.push(self.q_factor[(i, j)]);
            }
        }
        for z in &self.inducing {
            out.extend_from_slice(z);
        }
        out.push(self.kernel.log_signal_variance);
        out.extend_from_slice(&self.kernel.log_lengthscales);
        out.push(self.log_noise_variance);
        out
    }

    /// First non-finite parameter block, if any.
    pub fn non_finite_block(&self) -> Option<&'static str> {
        if self.q_mean.iter().any(|v| !v.is_finite()) {
            return Some("q_mean");
        }
        if self.q_factor.iter().any(|v| !v.is_finite()) {
            return Some("q_factor");
        }
        if self.inducing.iter().flatten().any(|v| !v.is_finite()) {
            return Some("inducing");
        }
        let k = &self.kernel;
        if !k.log_signal_variance.is_finite() || k.log_lengthscales.iter().any(|v| !v.is_finite()) {
            return Some("kernel");
        }
        if !self.log_noise_variance.is_finite() {
            return Some("noise_variance");
        }
        None
    }
}

fn free_len(m: usize) -> usize {
    m + m * (m + 1) / 2 + 2 * m + 4
}

impl FlowModel {
    pub fn n_inducing(&self) -> usize {
        self.inducing.len()
    }

    pub fn dt(&self) -> f64 {
        self.flow_time / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.inducing.len();
        if m == 0 {
            return Err(Error::invalid("flow model needs at least one inducing point"));
        }
        if self.q_mean.len() != m {
            return Err(Error::DimensionMismatch {
                what: "variational mean",
                expected: m,
                got: self.q_mean.len(),
            });
        }
        if self.q_factor.shape() != (m, m) {
            return Err(Error::DimensionMismatch {
                what: "variational factor",
                expected: m,
                got: self.q_factor.nrows(),
            });
        }
        if (0..m).any(|i| !(self.q_factor[(i, i)] > 0.0)) {
            return Err(Error::invalid("variational factor diagonal must be positive"));
        }
        if !(self.flow_time > 0.0 && self.flow_time.is_finite()) {
            return Err(Error::invalid("flow time must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("at least one solver step is required"));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        let tol = 1e-12 * self.flow_time;
        if self
            .inducing
            .iter()
            .any(|z| !z[0].is_finite() || !(z[1] >= -tol && z[1] <= self.flow_time + tol))
        {
            return Err(Error::invalid("inducing time coordinates must lie in [0, T]"));
        }
        Ok(())
    }

    /// Unconstrained parameter vector: variational mean, factor (column-major lower
    /// triangle with log diagonal), inducing inputs, log kernel hyperparameters, log noise.
    pub fn free_params(&self) -> Vec<f64> {
        let m = self.n_inducing();
        let mut out = Vec::with_capacity(free_len(m));
        out.extend_from_slice(self.q_mean.as_slice());
        for j in 0..m {
            out.push(self.q_factor[(j, j)].ln());
            for i in j + 1..m {
                out.push(self.q_factor[(i, j)]);
            }
        }
        for z in &self.inducing {
            out.extend_from_slice(z);
        }
        out.push(self.kernel.log_signal_variance());
        out.extend_from_slice(&self.kernel.log_lengthscales());
        out.push(self.noise_variance.ln());
        out
    }

    /// Inverse of [`FlowModel::free_params`], keeping the structural fields of `self`.
    pub fn with_free_params(&self, theta: &[f64]) -> FlowModel {
        let m = self.n_inducing();
        assert_eq!(theta.len(), free_len(m), "parameter vector length");
        let mut k = 0;
        let q_mean = DVector::from_column_slice(&theta[..m]);
        k += m;
        let mut q_factor = DMatrix::zeros(m, m);
        for j in 0..m {
            q_factor[(j, j)] = theta[k].exp();
            k += 1;
            for i in j + 1..m {
                q_factor[(i, j)] = theta[k];
                k += 1;
            }
        }
        let inducing = (0..m).map(|i| [theta[k + 2 * i], theta[k + 2 * i + 1]]).collect();
        k += 2 * m;
        let kernel = KernelParams::from_log(self.kernel.variant, theta[k], [theta[k + 1], theta[k + 2]]);
        k += 3;
        FlowModel {
            kernel,
            inducing,
            q_mean,
            q_factor,
            noise_variance: theta[k].exp(),
            ..self.clone()
        }
    }

    /// Clamps a free-parameter vector onto the feasible set: inducing times in `[0, T]`
    /// and log-scale parameters within `[-bound, bound]`.
    pub(crate) fn project_free_params(&self, theta: &mut [f64], bound: f64) {
        let m = self.n_inducing();
        let mut k = m;
        for j in 0..m {
            theta[k] = theta[k].clamp(-bound, bound);
            k += m - j;
        }
        for i in 0..m {
            theta[k + 2 * i + 1] = theta[k + 2 * i + 1].clamp(0.0, self.flow_time);
        }
        k += 2 * m;
        for v in &mut theta[k..k + 4] {
            *v = v.clamp(-bound, bound);
        }
    }

    /// Number of free parameters.
    pub fn n_free_params(&self) -> usize {
        free_len(self.n_inducing())
    }
}

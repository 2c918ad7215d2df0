use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six nondecreasing test functions on `(0, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchmarkFunction {
    Flat,
    Sinusoidal,
    Step,
    Linear,
    Exponential,
    Logistic,
}

pub const DOMAIN: (f64, f64) = (0.0, 10.0);

impl BenchmarkFunction {
    pub const ALL: [BenchmarkFunction; 6] = [
        BenchmarkFunction::Flat,
        BenchmarkFunction::Sinusoidal,
        BenchmarkFunction::Step,
        BenchmarkFunction::Linear,
        BenchmarkFunction::Exponential,
        BenchmarkFunction::Logistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkFunction::Flat => "flat",
            BenchmarkFunction::Sinusoidal => "sinusoidal",
            BenchmarkFunction::Step => "step",
            BenchmarkFunction::Linear => "linear",
            BenchmarkFunction::Exponential => "exponential",
            BenchmarkFunction::Logistic => "logistic",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|f| *f == self).unwrap()
    }

    /// Closed form, without a domain check.
    pub fn value(self, x: f64) -> f64 {
        match self {
            BenchmarkFunction::Flat => 3.0,
            BenchmarkFunction::Sinusoidal => 0.32 * (x + x.sin()),
            BenchmarkFunction::Step => {
                if x <= 8.0 {
                    3.0
                } else {
                    6.0
                }
            }
            BenchmarkFunction::Linear => 0.3 * x,
            BenchmarkFunction::Exponential => 0.15 * (0.6 * x - 3.0).exp(),
            BenchmarkFunction::Logistic => 3.0 / (1.0 + (-2.0 * x + 10.0).exp()),
        }
    }
}

impl fmt::Display for BenchmarkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown benchmark function '{s}'")))
    }
}

/// Evaluates a benchmark function; every input must lie in `(0, 10]`.
pub fn eval_function(id: BenchmarkFunction, x: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = x.iter().find(|v| !(**v > DOMAIN.0 && **v <= DOMAIN.1)) {
        return Err(Error::invalid(format!("{bad} is outside (0, 10]")));
    }
    Ok(x.iter().map(|&v| id.value(v)).collect())
}

/// Published `(mean, sd)` for one function.
pub type Reference = (f64, f64);

/// Flow RMSE×100 at N = 100, indexed like [`BenchmarkFunction::ALL`].
pub const PUBLISHED_RMSE_N100: [Reference; 6] = [(6.8, 3.2), (17.9, 4.2), (20.5, 5.0), (13.2, 6.7), (14.4, 4.8), (18.1, 5.0)];
/// Flow RMSE×100 at N = 15.
pub const PUBLISHED_RMSE_N15: [Reference; 6] = [(21.7, 15.0), (39.1, 13.0), (64.5, 10.7), (30.8, 12.0), (32.8, 17.9), (43.2, 15.2)];
/// Flow ELPD at N = 100.
pub const PUBLISHED_ELPD_N100: [Reference; 6] = [(-1.39, 0.05), (-1.42, 0.05), (-1.41, 0.08), (-1.39, 0.05), (-1.40, 0.07), (-1.43, 0.07)];
/// Exact GP RMSE×100 at N = 100 (no spread published).
pub const PUBLISHED_GP_RMSE_N100: [f64; 6] = [15.1, 21.9, 27.1, 16.7, 19.7, 25.5];

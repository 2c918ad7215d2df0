use nalgebra::DVector;

use super::linalg::CholFactor;
use crate::error::{Error, Result};

/// Reparameterized Gaussian draw `mean + L · eps`; deterministic given `eps`.
pub fn mvn_sample(mean: &DVector<f64>, cov_factor: &CholFactor, eps: &DVector<f64>) -> Result<DVector<f64>> {
    let n = cov_factor.dim();
    if mean.len() != n {
        return Err(Error::DimensionMismatch {
            what: "mvn mean",
            expected: n,
            got: mean.len(),
        });
    }
    if eps.len() != n {
        return Err(Error::DimensionMismatch {
            what: "mvn noise",
            expected: n,
            got: eps.len(),
        });
    }
    Ok(mean + cov_factor.l() * eps)
}

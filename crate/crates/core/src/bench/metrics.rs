use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{sample_flow, FlowModel};

/// Root-mean-square difference.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "rmse inputs",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("rmse of an empty vector"));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// `log((1/S) Σ_s exp(v_s))`, stable for large magnitudes.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = v.iter().map(|a| (a - max).exp()).sum();
    max + (s / v.len() as f64).ln()
}

/// Mean over points of the log predictive density, averaged over `f` draws per point.
///
/// `draws[s][n]` is the latent value of draw `s` at point `n`.
pub fn elpd_from_draws(draws: &[Vec<f64>], y: &[f64], noise_variance: f64) -> f64 {
    let c = -0.5 * (2.0 * std::f64::consts::PI * noise_variance).ln();
    let mut total = 0.0;
    let mut lp = vec![0.0; draws.len()];
    for (n, yn) in y.iter().enumerate() {
        for (s, d) in draws.iter().enumerate() {
            let r = yn - d[n];
            lp[s] = c - r * r / (2.0 * noise_variance);
        }
        total += log_mean_exp(&lp);
    }
    total / y.len() as f64
}

/// Expected log predictive density of held-out observations under coherent flow draws.
pub fn elpd<R: Rng + ?Sized>(model: &FlowModel, test: &Dataset, n_samples: usize, rng: &mut R) -> Result<f64> {
    if n_samples < 100 {
        return Err(Error::invalid("ELPD needs at least 100 samples"));
    }
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let draws = (0..n_samples)
        .map(|_| sample_flow(model, &test.x, rng).map(|s| s.terminal))
        .collect::<Result<Vec<_>>>()?;
    Ok(elpd_from_draws(&draws, &test.y, model.noise_variance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_basics() {
        let t = [1.0, 2.0, 3.0];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(rmse(&[2.0, 3.0, 4.0], &t).unwrap(), 1.0);
        assert!(rmse(&[1.0], &t).is_err());
    }

    #[test]
    fn rmse_hand_computed() {
        let a = [0.3, -1.2, 4.0, 2.2, 0.0, 9.1, -3.3, 1.1, 0.5, 7.0];
        let b = [0.1, -1.0, 3.5, 2.0, 0.4, 9.0, -3.0, 1.6, 0.2, 6.1];
        // squared differences sum to 1.78
        let want = (1.78f64 / 10.0).sqrt();
        assert!((rmse(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_density() {
        let draws = vec![vec![0.5, 1.0]; 3];
        let v = elpd_from_draws(&draws, &[0.5, 1.0], 1.0);
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[-1000.0, -1000.0]) + 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-12);
    }
}

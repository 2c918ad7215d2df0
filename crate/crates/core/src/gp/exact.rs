//! Exact Gaussian-process regression baseline with ML-II hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::kernel::{KernelGrad, KernelParams, Point};
use super::linalg::{cholesky_unchecked, CholFactor, DEFAULT_JITTER};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::maximize;
use crate::rng::SeedStream;
use crate::train::OptimizerConfig;

/// Number of optimizer starts (the given init plus perturbed copies).
pub const RESTARTS: usize = 3;

const LOG_BOUND: f64 = 18.0;

/// Exact GP on one-dimensional inputs. Only the first (space) lengthscale is used.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactGpModel {
    pub kernel: KernelParams,
    pub noise_variance: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

fn lift(x: &[f64]) -> Vec<Point> {
    x.iter().map(|&v| [v, 0.0]).collect()
}

impl ExactGpModel {
    pub fn new(kernel: KernelParams, noise_variance: f64, data: &Dataset) -> Result<Self> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(ExactGpModel {
            kernel,
            noise_variance,
            x: data.x.clone(),
            y: data.y.clone(),
        })
    }

    fn factor(&self) -> Result<(Vec<Point>, DMatrix<f64>, CholFactor)> {
        let pts = lift(&self.x);
        let kxx = self.kernel.gram(&pts);
        let mut k = kxx.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance;
        }
        let chol = cholesky_unchecked(&k, DEFAULT_JITTER)?;
        Ok((pts, kxx, chol))
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let (_, _, chol) = self.factor()?;
        let y = DVector::from_column_slice(&self.y);
        Ok(lml_from(&chol, &y))
    }

    /// Value and gradient with respect to `[log σ_f², log ℓ_s, log σ_n²]`.
    fn lml_and_grad(&self) -> Result<(f64, [f64; 3])> {
        let (pts, kxx, chol) = self.factor()?;
        let y = DVector::from_column_slice(&self.y);
        let value = lml_from(&chol, &y);
        let alpha = chol.solve_vec(&y);
        let mut bar = (&alpha * alpha.transpose() - chol.inverse()) * 0.5;
        chol.backprop_jitter(&mut bar);
        let noise_grad = self.noise_variance * bar.trace();
        let mut hyper = KernelGrad::default();
        self.kernel.backprop_gram(&pts, &kxx, &bar, None, &mut hyper);
        Ok((value, [hyper.log_signal_variance, hyper.log_lengthscales[0], noise_grad]))
    }

    fn to_theta(&self) -> Vec<f64> {
        vec![
            self.kernel.log_signal_variance(),
            self.kernel.log_lengthscales()[0],
            self.noise_variance.ln(),
        ]
    }

    fn with_theta(&self, theta: &[f64]) -> Self {
        let ls = self.kernel.log_lengthscales();
        ExactGpModel {
            kernel: KernelParams::from_log(self.kernel.variant, theta[0], [theta[1], ls[1]]),
            noise_variance: theta[2].exp(),
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    /// Predictive mean and latent variance (clamped at zero) at `x_star`.
    pub fn predict(&self, x_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (pts, _, chol) = self.factor()?;
        let star = lift(x_star);
        let k_star = self.kernel.cross(&pts, &star);
        let y = DVector::from_column_slice(&self.y);
        let alpha = chol.solve_vec(&y);
        let mean = k_star.transpose() * alpha;
        let v = chol.solve_lower(&k_star);
        let sv = self.kernel.signal_variance();
        let var = (0..star.len())
            .map(|j| (sv - v.column(j).norm_squared()).max(0.0))
            .collect();
        Ok((mean.as_slice().to_vec(), var))
    }
}

fn lml_from(chol: &CholFactor, y: &DVector<f64>) -> f64 {
    let w = chol.solve_lower_vec(y);
    let n = y.len() as f64;
    -0.5 * w.norm_squared() - 0.5 * chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// ML-II fit by Adam ascent on the exact log marginal likelihood.
///
/// The first start is `init` itself; the others perturb its log-hyperparameters with
/// standard normal noise drawn from `opt.seed`. Returns the start with the highest
/// log marginal likelihood, which is never below that of `init`.
pub fn exact_gp_fit(data: &Dataset, init: &ExactGpModel, opt: &OptimizerConfig) -> Result<ExactGpModel> {
    if data.len() < 2 {
        return Err(Error::invalid("exact GP needs at least two data points"));
    }
    let base = ExactGpModel {
        x: data.x.clone(),
        y: data.y.clone(),
        ..init.clone()
    };
    let mut rng = SeedStream::new(opt.seed).child(0xE6).rng();
    let project = |t: &mut [f64]| {
        for v in t.iter_mut() {
            *v = v.clamp(-LOG_BOUND, LOG_BOUND);
        }
    };
    let mut best: Option<(f64, ExactGpModel)> = None;
    for restart in 0..RESTARTS {
        let mut theta0 = base.to_theta();
        if restart > 0 {
            for v in theta0.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += e;
            }
        }
        let outcome = maximize(
            theta0,
            opt,
            |_, t| {
                let (v, g) = base.with_theta(t).lml_and_grad()?;
                Ok((v, g.to_vec()))
            },
            |t| base.with_theta(t).log_marginal_likelihood(),
            project,
        );
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) if restart > 0 && e.is_numerical() => {
                log::debug!("exact GP restart {restart} failed: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let model = base.with_theta(&outcome.best);
        let value = outcome.trace.best_validation;
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, model));
        }
    }
    best.map(|(_, m)| m).ok_or_else(|| Error::TrainingFailed {
        iterations: opt.max_iters,
        reason: "every exact GP restart failed".into(),
    })
}

pub fn exact_gp_predict(model: &ExactGpModel, x_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.predict(x_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel::KernelVariant;
    use crate::gp::linalg::cholesky;
    use crate::rng::{rng_from_seed, standard_normals};
    use approx::assert_relative_eq;

    fn se(sv: f64, ls: f64) -> KernelParams {
        KernelParams::new(KernelVariant::SquaredExponential, sv, [ls, 1.0]).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = Dataset::new(vec![0.1, 0.7, 1.3, 2.2, 3.0, 4.1], vec![0.2, 0.5, 0.4, 1.1, 1.5, 1.2]).unwrap();
        for variant in [KernelVariant::SquaredExponential, KernelVariant::Matern32Ard] {
            let k = KernelParams::new(variant, 0.8, [1.3, 1.0]).unwrap();
            let m = ExactGpModel::new(k, 0.2, &data).unwrap();
            let (_, g) = m.lml_and_grad().unwrap();
            let theta = m.to_theta();
            let h = 1e-5;
            for i in 0..3 {
                let mut p = theta.clone();
                let mut q = theta.clone();
                p[i] += h;
                q[i] -= h;
                let fd = (m.with_theta(&p).log_marginal_likelihood().unwrap()
                    - m.with_theta(&q).log_marginal_likelihood().unwrap())
                    / (2.0 * h);
                assert_relative_eq!(fd, g[i], max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let data = Dataset::new(vec![0.0, 1.0, 2.5, 3.0, 4.5], vec![0.3, -0.1, 0.8, 1.0, 0.2]).unwrap();
        let k = se(1.4, 0.9);
        let m = ExactGpModel::new(k, 0.05, &data).unwrap();
        let xs = [0.5, 2.0, 3.7];
        let (mean, var) = m.predict(&xs).unwrap();
        // dense oracle: explicit inverse of K + (σ² + jitter) I
        let pts = lift(&data.x);
        let mut kk = k.cross(&pts, &pts);
        for i in 0..5 {
            kk[(i, i)] += 0.05;
        }
        let jit = cholesky(&kk, DEFAULT_JITTER).unwrap().jitter_applied();
        for i in 0..5 {
            kk[(i, i)] += jit;
        }
        let inv = kk.try_inverse().unwrap();
        let ks = k.cross(&pts, &lift(&xs));
        let y = DVector::from_column_slice(&data.y);
        let om = ks.transpose() * &inv * &y;
        let ov = ks.transpose() * &inv * &ks;
        for j in 0..3 {
            assert_relative_eq!(mean[j], om[j], epsilon = 1e-8);
            assert_relative_eq!(var[j], (1.4 - ov[(j, j)]).max(0.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn interpolates_with_tiny_noise_and_reverts_far_away() {
        let data = Dataset::new(vec![0.0, 1.0, 2.0], vec![1.0, -0.5, 0.25]).unwrap();
        let m = ExactGpModel::new(se(2.0, 0.8), 1e-8, &data).unwrap();
        let (mean, _) = m.predict(&data.x).unwrap();
        for (a, b) in mean.iter().zip(&data.y) {
            assert!((a - b).abs() < 1e-4);
        }
        let (mean, var) = m.predict(&[100.0]).unwrap();
        assert!(mean[0].abs() < 1e-10);
        assert_relative_eq!(var[0], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn fit_never_lowers_likelihood() {
        let mut rng = rng_from_seed(3);
        let x: Vec<f64> = (1..=30).map(|i| i as f64 / 3.0).collect();
        let e = standard_normals(&mut rng, 30);
        let y: Vec<f64> = x.iter().zip(&e).map(|(x, e)| (x * 0.7).sin() + 0.3 * e).collect();
        let data = Dataset::new(x, y).unwrap();
        let init = ExactGpModel::new(se(1.0, 3.0), 0.5, &data).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            max_iters: 300,
            ..Default::default()
        };
        let fitted = exact_gp_fit(&data, &init, &cfg).unwrap();
        assert!(fitted.log_marginal_likelihood().unwrap() >= init.log_marginal_likelihood().unwrap());
    }

    #[test]
    fn prior_sample_recovers_small_noise() {
        let true_noise = 1e-4;
        let x: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let k = se(1.0, 1.0);
        let pts = lift(&x);
        let mut cov = k.gram(&pts);
        for i in 0..x.len() {
            cov[(i, i)] += true_noise;
        }
        let f = cholesky(&cov, 0.0).unwrap();
        let mut rng = rng_from_seed(11);
        let e = DVector::from_vec(standard_normals(&mut rng, x.len()));
        let y = f.l() * e;
        let data = Dataset::new(x, y.as_slice().to_vec()).unwrap();
        let init = ExactGpModel::new(k, true_noise, &data).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.02,
            max_iters: 300,
            ..Default::default()
        };
        let fitted = exact_gp_fit(&data, &init, &cfg).unwrap();
        assert!(fitted.noise_variance < 10.0 * true_noise, "{}", fitted.noise_variance);
    }

    #[test]
    fn constant_targets_are_reproduced() {
        let x: Vec<f64> = (1..=20).map(|i| i as f64 * 0.5).collect();
        let data = Dataset::new(x.clone(), vec![2.0; 20]).unwrap();
        let init = ExactGpModel::new(se(1.0, 2.0), 0.1, &data).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            max_iters: 1500,
            ..Default::default()
        };
        let fitted = exact_gp_fit(&data, &init, &cfg).unwrap();
        assert!(fitted.noise_variance < init.noise_variance);
        let (mean, _) = fitted.predict(&x).unwrap();
        for m in mean {
            assert!((m - 2.0).abs() < 1e-2, "{m}");
        }
    }

    #[test]
    fn rejects_tiny_datasets() {
        let data = Dataset::new(vec![1.0], vec![1.0]).unwrap();
        let init = ExactGpModel::new(se(1.0, 1.0), 0.1, &data).unwrap();
        assert!(exact_gp_fit(&data, &init, &OptimizerConfig::default()).is_err());
    }
}

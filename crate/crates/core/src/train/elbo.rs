//! Monte-Carlo ELBO of the flow model and its exact reverse-mode gradient at fixed
//! randomness.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::field::{step_backward, step_forward, FieldGrad, InducingPrior, StepCache, StepUse};
use crate::flow::{FlowGradient, FlowModel};
use crate::gp::kl::{kl_lower, kl_lower_grad};
use crate::rng::standard_normals;

/// Standard-normal draws behind one coherent path: the inducing-output noise and one
/// vector per solver step.
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    pub u_eps: DVector<f64>,
    pub steps: Vec<Vec<f64>>,
}

impl PathNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize, n_steps: usize) -> Self {
        let u_eps = DVector::from_vec(standard_normals(rng, m));
        let steps = (0..n_steps).map(|_| standard_normals(rng, n)).collect();
        PathNoise { u_eps, steps }
    }

    pub fn draw_many<R: Rng + ?Sized>(rng: &mut R, model: &FlowModel, n: usize, count: usize) -> Vec<Self> {
        (0..count)
            .map(|_| PathNoise::draw(rng, model.n_inducing(), n, model.n_steps))
            .collect()
    }
}

/// The two parts of the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub elbo: f64,
    pub expected_loglik: f64,
    pub kl: f64,
}

fn check(model: &FlowModel, data: &Dataset, noise: &[PathNoise]) -> Result<()> {
    model.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if noise.is_empty() {
        return Err(Error::invalid("at least one Monte-Carlo sample is required"));
    }
    let (m, n) = (model.n_inducing(), data.len());
    for p in noise {
        if p.u_eps.len() != m {
            return Err(Error::DimensionMismatch {
                what: "inducing noise",
                expected: m,
                got: p.u_eps.len(),
            });
        }
        if p.steps.len() != model.n_steps {
            return Err(Error::DimensionMismatch {
                what: "path steps",
                expected: model.n_steps,
                got: p.steps.len(),
            });
        }
        if let Some(bad) = p.steps.iter().find(|e| e.len() != n) {
            return Err(Error::DimensionMismatch {
                what: "step noise",
                expected: n,
                got: bad.len(),
            });
        }
    }
    Ok(())
}

fn gaussian_loglik(y: &[f64], f: &[f64], var: f64) -> f64 {
    let c = -0.5 * (2.0 * PI * var).ln();
    y.iter().zip(f).map(|(y, f)| c - (y - f) * (y - f) / (2.0 * var)).sum()
}

fn inducing_draw(model: &FlowModel, u_eps: &DVector<f64>) -> DVector<f64> {
    &model.q_mean + model.q_factor.lower_triangle() * u_eps
}

/// ELBO terms at fixed path noise.
pub fn elbo_terms(model: &FlowModel, data: &Dataset, noise: &[PathNoise]) -> Result<ElboTerms> {
    check(model, data, noise)?;
    let prior = InducingPrior::new(model)?;
    let dt = model.dt();
    let mut total = 0.0;
    for p in noise {
        let u = inducing_draw(model, &p.u_eps);
        let alpha = prior.chol.solve_vec(&u);
        let mut x = data.x.clone();
        for (k, eps) in p.steps.iter().enumerate() {
            x = step_forward(model, &prior, &alpha, &x, k as f64 * dt, eps, dt, StepUse::Value)?.0;
        }
        total += gaussian_loglik(&data.y, &x, model.noise_variance);
    }
    let expected_loglik = total / noise.len() as f64;
    let kl = kl_lower(&model.q_mean, &model.q_factor, &prior.chol);
    Ok(ElboTerms {
        elbo: expected_loglik - kl,
        expected_loglik,
        kl,
    })
}

/// Monte-Carlo ELBO with `n_samples` coherent paths over all training inputs.
pub fn elbo<R: Rng + ?Sized>(model: &FlowModel, data: &Dataset, n_samples: usize, rng: &mut R) -> Result<f64> {
    let noise = PathNoise::draw_many(rng, model, data.len(), n_samples);
    Ok(elbo_terms(model, data, &noise)?.elbo)
}

/// ELBO estimate and its exact gradient with respect to every free parameter, at fixed
/// path noise.
pub fn elbo_grad_with_noise(model: &FlowModel, data: &Dataset, noise: &[PathNoise]) -> Result<(ElboTerms, FlowGradient)> {
    check(model, data, noise)?;
    let m = model.n_inducing();
    let prior = InducingPrior::new(model)?;
    let dt = model.dt();
    let s_inv = 1.0 / noise.len() as f64;
    let var = model.noise_variance;
    let ls = model.q_factor.lower_triangle();

    let mut grad = FlowGradient::zeros(m);
    let mut ls_bar = DMatrix::zeros(m, m);
    let mut kzz_bar = DMatrix::zeros(m, m);
    let mut lz_bar = DMatrix::zeros(m, m);
    let mut total = 0.0;

    for p in noise {
        let u = &model.q_mean + &ls * &p.u_eps;
        let alpha = prior.chol.solve_vec(&u);
        let mut caches: Vec<StepCache> = Vec::with_capacity(model.n_steps);
        let mut x = data.x.clone();
        for (k, eps) in p.steps.iter().enumerate() {
            let (next, cache) = step_forward(model, &prior, &alpha, &x, k as f64 * dt, eps, dt, StepUse::Gradient)?;
            caches.push(cache.expect("cache requested"));
            x = next;
        }
        total += gaussian_loglik(&data.y, &x, var);

        let mut x_bar: Vec<f64> = data.y.iter().zip(&x).map(|(y, f)| s_inv * (y - f) / var).collect();
        grad.log_noise_variance += s_inv
            * data
                .y
                .iter()
                .zip(&x)
                .map(|(y, f)| -0.5 + (y - f) * (y - f) / (2.0 * var))
                .sum::<f64>();

        let mut acc = FieldGrad::zeros(m);
        for cache in caches.iter().rev() {
            x_bar = step_backward(model, &prior, &alpha, cache, dt, &x_bar, &mut acc);
        }

        // α = K⁻¹ u
        let u_bar = prior.chol.solve_vec(&acc.alpha);
        let outer = &u_bar * alpha.transpose();
        kzz_bar -= (&outer + outer.transpose()) * 0.5;
        grad.q_mean += &u_bar;
        for j in 0..m {
            for i in j..m {
                ls_bar[(i, j)] += u_bar[i] * p.u_eps[j];
            }
        }
        lz_bar += &acc.lz;
        for (g, a) in grad.inducing.iter_mut().zip(&acc.inducing) {
            g[0] += a[0];
            g[1] += a[1];
        }
        grad.kernel.add(&acc.kernel);
    }

    let kl = kl_lower(&model.q_mean, &ls, &prior.chol);
    let klg = kl_lower_grad(&model.q_mean, &ls, &prior.chol);
    grad.q_mean -= &klg.m;
    ls_bar -= &klg.s_l;
    kzz_bar -= &klg.k;

    kzz_bar += prior.chol.backprop(&lz_bar);
    prior.chol.backprop_jitter(&mut kzz_bar);
    model
        .kernel
        .backprop_gram(&model.inducing, &prior.kzz, &kzz_bar, Some(&mut grad.inducing), &mut grad.kernel);

    for j in 0..m {
        ls_bar[(j, j)] *= ls[(j, j)];
    }
    grad.q_factor = ls_bar;

    let expected_loglik = total * s_inv;
    let terms = ElboTerms {
        elbo: expected_loglik - kl,
        expected_loglik,
        kl,
    };
    if let Some(block) = grad.non_finite_block() {
        return Err(Error::NonFiniteGradient { block });
    }
    Ok((terms, grad))
}

/// [`elbo`] together with its gradient, drawing fresh path noise from `rng`.
pub fn elbo_grad<R: Rng + ?Sized>(model: &FlowModel, data: &Dataset, n_samples: usize, rng: &mut R) -> Result<(f64, FlowGradient)> {
    let noise = PathNoise::draw_many(rng, model, data.len(), n_samples);
    let (terms, grad) = elbo_grad_with_noise(model, data, &noise)?;
    Ok((terms.elbo, grad))
}

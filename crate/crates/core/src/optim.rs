//! Adam ascent with a reduce-on-plateau learning-rate schedule.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::train::{OptimizerConfig, TraceRecord};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Consecutive non-finite iterations tolerated before giving up.
pub const MAX_NON_FINITE: usize = 20;

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One ascent step on `theta` along `grad`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] += lr * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Multiplies the learning rate by `decay` whenever the best validation value has not
/// improved for `patience` iterations.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    patience: usize,
    best: f64,
    last_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            decay,
            patience,
            best: f64::NEG_INFINITY,
            last_improvement: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records a validation value observed after `iter` iterations; true if it is a new best.
    pub fn observe(&mut self, iter: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.last_improvement = iter;
            true
        } else {
            false
        }
    }

    /// Applies the decay rule after `iter` completed iterations.
    pub fn tick(&mut self, iter: usize) {
        if iter - self.last_improvement >= self.patience {
            self.lr *= self.decay;
            self.last_improvement = iter;
        }
    }
}

pub(crate) struct AscentOutcome {
    pub best: Vec<f64>,
    pub trace: TraceRecord,
}

/// Generic maximization loop.
///
/// `grad` returns the objective estimate and its gradient at `theta`; `validate`
/// returns a low-noise objective used for best-parameter selection and the plateau
/// rule; `project` maps parameters back onto their feasible set after each step.
pub(crate) fn maximize<G, V, P>(
    theta0: Vec<f64>,
    cfg: &OptimizerConfig,
    mut grad: G,
    mut validate: V,
    project: P,
) -> Result<AscentOutcome>
where
    G: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<f64>,
    P: Fn(&mut [f64]),
{
    cfg.validate()?;
    let start = Instant::now();
    let mut theta = theta0;
    project(&mut theta);
    let mut adam = Adam::new(theta.len());
    let mut schedule = PlateauSchedule::new(cfg.learning_rate, cfg.decay_factor, cfg.plateau_patience);
    let mut trace = TraceRecord::default();

    let initial = validate(&theta)?;
    if !initial.is_finite() {
        return Err(Error::TrainingFailed {
            iterations: 0,
            reason: "objective is not finite at the initial parameters".into(),
        });
    }
    schedule.observe(0, initial);
    trace.validation.push((0, initial));
    let mut best = theta.clone();
    trace.best_validation = initial;

    let mut streak = 0usize;
    for iter in 0..cfg.max_iters {
        let lr = schedule.lr();
        if lr < cfg.min_learning_rate {
            break;
        }
        let value = match grad(iter, &theta) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                adam.step(&mut theta, &g, lr);
                project(&mut theta);
                f
            }
            Ok(_) => f64::NAN,
            Err(e) if e.is_numerical() => {
                log::debug!("iteration {iter}: {e}");
                f64::NAN
            }
            Err(e) => return Err(e),
        };
        trace.elbo.push(value);
        trace.learning_rate.push(lr);
        trace.wall_time.push(start.elapsed().as_secs_f64());
        if value.is_nan() {
            streak += 1;
            if streak > MAX_NON_FINITE {
                return Err(Error::TrainingFailed {
                    iterations: iter + 1,
                    reason: format!("{streak} consecutive non-finite objective evaluations"),
                });
            }
        } else {
            streak = 0;
        }

        let done = iter + 1;
        if done % cfg.validate_every == 0 || done == cfg.max_iters {
            let v = match validate(&theta) {
                Ok(v) if v.is_finite() => v,
                Ok(_) => f64::NEG_INFINITY,
                Err(e) if e.is_numerical() => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            trace.validation.push((done, v));
            if schedule.observe(done, v) {
                best.copy_from_slice(&theta);
                trace.best_iteration = done;
                trace.best_validation = v;
            }
        }
        schedule.tick(done);
    }
    Ok(AscentOutcome { best, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_climbs_a_concave_quadratic() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            max_iters: 2000,
            plateau_patience: 100,
            validate_every: 1,
            ..Default::default()
        };
        let target = [1.5, -2.0];
        let f = |t: &[f64]| -((t[0] - target[0]).powi(2) + (t[1] - target[1]).powi(2));
        let out = maximize(
            vec![0.0, 0.0],
            &cfg,
            |_, t| Ok((f(t), vec![-2.0 * (t[0] - target[0]), -2.0 * (t[1] - target[1])])),
            |t| Ok(f(t)),
            |_| {},
        )
        .unwrap();
        assert!((out.best[0] - 1.5).abs() < 1e-3);
        assert!((out.best[1] + 2.0).abs() < 1e-3);
    }

    #[test]
    fn plateau_decays_by_exact_factor() {
        let mut s = PlateauSchedule::new(0.01, 0.5, 3);
        s.observe(0, 1.0);
        for it in 1..=3 {
            s.observe(it, 0.5);
            s.tick(it);
        }
        assert_eq!(s.lr(), 0.005);
        s.observe(4, 2.0);
        s.tick(4);
        assert_eq!(s.lr(), 0.005);
    }

    #[test]
    fn persistent_non_finite_fails() {
        let cfg = OptimizerConfig {
            max_iters: 100,
            ..Default::default()
        };
        let res = maximize(vec![0.0], &cfg, |_, _| Ok((f64::NAN, vec![0.0])), |_| Ok(0.0), |_| {});
        match res {
            Err(Error::TrainingFailed { iterations, .. }) => assert_eq!(iterations, MAX_NON_FINITE + 1),
            other => panic!("unexpected {:?}", other.err()),
        }
    }
}

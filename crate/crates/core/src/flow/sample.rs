use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::field::{step_forward, InducingPrior, StepUse};
use super::model::FlowModel;
use crate::error::{Error, Result};
use crate::gp::{mvn_sample, CholFactor};
use crate::rng::standard_normals;

/// One coherent draw of the flow: a single inducing-output sample and one noise vector
/// per solver step, shared by all particles.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    /// `n_steps + 1` rows of particle positions; row 0 is the input.
    pub trajectory: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
    pub u_draw: DVector<f64>,
    pub eps_record: Vec<Vec<f64>>,
}

impl FlowSample {
    pub fn n_particles(&self) -> usize {
        self.terminal.len()
    }

    /// Solver time of trajectory row `step`.
    pub fn time_of(&self, step: usize, model: &FlowModel) -> f64 {
        step as f64 * model.dt()
    }
}

fn check_inputs(x0: &[f64]) -> Result<()> {
    if x0.is_empty() {
        return Err(Error::invalid("at least one particle is required"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial positions must be finite"));
    }
    Ok(())
}

/// Draws `u ~ q(U)` and pushes `x0` through the flow with one coherent noise stream.
pub fn sample_flow<R: Rng + ?Sized>(model: &FlowModel, x0: &[f64], rng: &mut R) -> Result<FlowSample> {
    model.validate()?;
    check_inputs(x0)?;
    let m = model.n_inducing();
    let u_eps = DVector::from_vec(standard_normals(rng, m));
    let u_draw = mvn_sample(&model.q_mean, &CholFactor::from_lower(model.q_factor.clone())?, &u_eps)?;
    let eps_record: Vec<Vec<f64>> = (0..model.n_steps).map(|_| standard_normals(rng, x0.len())).collect();
    run(model, x0, u_draw, eps_record)
}

/// Recomputes a draw from its recorded randomness.
pub fn replay(model: &FlowModel, x0: &[f64], u_draw: &DVector<f64>, eps_record: &[Vec<f64>]) -> Result<FlowSample> {
    model.validate()?;
    check_inputs(x0)?;
    if u_draw.len() != model.n_inducing() {
        return Err(Error::DimensionMismatch {
            what: "inducing outputs",
            expected: model.n_inducing(),
            got: u_draw.len(),
        });
    }
    if eps_record.len() != model.n_steps {
        return Err(Error::DimensionMismatch {
            what: "recorded steps",
            expected: model.n_steps,
            got: eps_record.len(),
        });
    }
    if let Some(bad) = eps_record.iter().find(|e| e.len() != x0.len()) {
        return Err(Error::DimensionMismatch {
            what: "step noise",
            expected: x0.len(),
            got: bad.len(),
        });
    }
    run(model, x0, u_draw.clone(), eps_record.to_vec())
}

fn run(model: &FlowModel, x0: &[f64], u_draw: DVector<f64>, eps_record: Vec<Vec<f64>>) -> Result<FlowSample> {
    let prior = InducingPrior::new(model)?;
    let alpha = prior.chol.solve_vec(&u_draw);
    let dt = model.dt();
    let mut trajectory = Vec::with_capacity(model.n_steps + 1);
    trajectory.push(x0.to_vec());
    for (k, eps) in eps_record.iter().enumerate() {
        let x = trajectory.last().unwrap();
        let (next, _) = step_forward(model, &prior, &alpha, x, k as f64 * dt, eps, dt, StepUse::Sample)?;
        trajectory.push(next);
    }
    Ok(FlowSample {
        terminal: trajectory.last().unwrap().clone(),
        trajectory,
        u_draw,
        eps_record,
    })
}

/// Number of ordering violations of `terminal` relative to `x0`: pairs adjacent in the
/// sorted order of `x0` whose terminal values decrease by more than `tie_tol`, plus
/// tied inputs whose terminal values differ by more than `tie_tol`.
pub fn ordering_violations(x0: &[f64], terminal: &[f64], tie_tol: f64) -> usize {
    assert_eq!(x0.len(), terminal.len(), "input and terminal lengths differ");
    let mut order: Vec<usize> = (0..x0.len()).collect();
    order.sort_by(|&a, &b| x0[a].total_cmp(&x0[b]).then(a.cmp(&b)));
    order
        .windows(2)
        .filter(|w| {
            let gap = terminal[w[1]] - terminal[w[0]];
            if x0[w[0]] == x0[w[1]] {
                gap.abs() > tie_tol
            } else {
                gap < -tie_tol
            }
        })
        .count()
}

/// Monte-Carlo predictive summary at a set of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `n_samples × n_points` terminal values, one row per coherent draw.
    pub samples: DMatrix<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Predictive mean, sample SD and empirical 2.5% / 97.5% quantiles of the flow at
/// `x_star`, from `n_samples` coherent draws over `x_star` alone.
pub fn predict<R: Rng + ?Sized>(model: &FlowModel, x_star: &[f64], n_samples: usize, rng: &mut R) -> Result<Prediction> {
    if n_samples < 2 {
        return Err(Error::invalid("prediction needs at least two samples"));
    }
    let n = x_star.len();
    let mut samples = DMatrix::zeros(n_samples, n);
    for s in 0..n_samples {
        let draw = sample_flow(model, x_star, rng)?;
        for (j, v) in draw.terminal.iter().enumerate() {
            samples[(s, j)] = *v;
        }
    }
    let mut mean = Vec::with_capacity(n);
    let mut sd = Vec::with_capacity(n);
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for j in 0..n {
        let mut col: Vec<f64> = samples.column(j).iter().copied().collect();
        let mu = col.iter().sum::<f64>() / n_samples as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n_samples - 1) as f64;
        col.sort_by(f64::total_cmp);
        mean.push(mu);
        sd.push(var.sqrt());
        lower.push(quantile_sorted(&col, 0.025));
        upper.push(quantile_sorted(&col, 0.975));
    }
    Ok(Prediction {
        x: x_star.to_vec(),
        mean,
        sd,
        lower,
        upper,
        samples,
    })
}

/// Full trajectories of `n_draws` coherent draws.
pub fn streamlines<R: Rng + ?Sized>(model: &FlowModel, x0: &[f64], n_draws: usize, rng: &mut R) -> Result<Vec<FlowSample>> {
    (0..n_draws).map(|_| sample_flow(model, x0, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::model::DiffusionMode;
    use crate::gp::{KernelParams, KernelVariant, Point};
    use crate::rng::rng_from_seed;

    fn model(m: usize) -> FlowModel {
        let inducing: Vec<Point> = (0..m).map(|i| [i as f64 * 2.0, (i % 2) as f64 * 0.5]).collect();
        FlowModel {
            kernel: KernelParams::new(KernelVariant::SquaredExponential, 1.0, [2.0, 0.5]).unwrap(),
            inducing,
            q_mean: DVector::from_fn(m, |i, _| (i as f64).sin()),
            q_factor: DMatrix::identity(m, m) * 0.3,
            noise_variance: 0.1,
            flow_time: 1.0,
            n_steps: 8,
            diffusion: DiffusionMode::Joint,
            seed: 0,
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let m = model(5);
        let x0 = [0.5, 1.0, 3.0, 7.5];
        let a = sample_flow(&m, &x0, &mut rng_from_seed(11)).unwrap();
        let b = sample_flow(&m, &x0, &mut rng_from_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory.len(), 9);
        assert_eq!(a.trajectory[0], x0.to_vec());
        assert_eq!(a.trajectory.last().unwrap(), &a.terminal);
    }

    #[test]
    fn replay_is_bitwise() {
        let m = model(5);
        let x0 = [0.5, 1.0, 3.0, 7.5];
        let a = sample_flow(&m, &x0, &mut rng_from_seed(3)).unwrap();
        let b = replay(&m, &x0, &a.u_draw, &a.eps_record).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collapsed_posterior_is_identity() {
        let mut m = model(4);
        m.q_mean.fill(0.0);
        m.q_factor = DMatrix::identity(4, 4) * 1e-12;
        m.diffusion = DiffusionMode::Off;
        let x0 = [0.1, 2.0, 4.0];
        let s = sample_flow(&m, &x0, &mut rng_from_seed(1)).unwrap();
        for (a, b) in s.terminal.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-10);
        }
        let p = predict(&m, &x0, 5, &mut rng_from_seed(2)).unwrap();
        for j in 0..3 {
            assert!((p.mean[j] - x0[j]).abs() < 1e-10);
            assert!(p.upper[j] - p.lower[j] < 1e-10);
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert!((quantile_sorted(&v, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn streamlines_start_at_inputs_and_deterministic_mode_repeats() {
        let mut m = model(4);
        m.diffusion = DiffusionMode::Off;
        m.q_factor = DMatrix::identity(4, 4) * 1e-300;
        let x0 = [0.0, 1.0, 2.0];
        let draws = streamlines(&m, &x0, 3, &mut rng_from_seed(4)).unwrap();
        assert_eq!(draws.len(), 3);
        for d in &draws {
            assert_eq!(d.trajectory[0], x0.to_vec());
            assert_eq!(d.trajectory, draws[0].trajectory);
        }
    }

    #[test]
    fn counts_violations_in_input_order() {
        assert_eq!(ordering_violations(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0], 1e-9), 0);
        assert_eq!(ordering_violations(&[2.0, 0.0, 1.0], &[5.0, 3.0, 4.0], 1e-9), 0);
        assert_eq!(ordering_violations(&[0.0, 1.0, 2.0], &[0.0, 2.0, 1.0], 1e-9), 1);
        assert_eq!(ordering_violations(&[0.0, 1.0], &[1.0, 1.0 - 1e-10], 1e-9), 0);
        assert_eq!(ordering_violations(&[1.0, 1.0], &[0.0, 1e-6], 1e-9), 1);
    }

    #[test]
    fn predict_rejects_single_sample() {
        assert!(predict(&model(3), &[1.0], 1, &mut rng_from_seed(0)).is_err());
    }
}

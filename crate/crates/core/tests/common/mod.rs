#![allow(dead_code)]

use monoflow::flow::{DiffusionMode, FlowModel};
use monoflow::gp::{KernelParams, KernelVariant, Point};
use monoflow::rng::rng_from_seed;
use monoflow::train::{elbo_grad_with_noise, elbo_terms, PathNoise};
use monoflow::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub const BLOCKS: [&str; 5] = ["q_mean", "q_factor", "inducing", "kernel", "noise_variance"];

/// Small random model and dataset for finite-difference checks.
pub fn gradient_instance(seed: u64) -> (FlowModel, Dataset, Vec<PathNoise>) {
    let mut rng = rng_from_seed(seed);
    let n = rng.random_range(4..=10);
    let m = rng.random_range(3..=5);
    let n_steps = rng.random_range(2..=5);
    let flow_time = 0.5 + rng.random::<f64>();
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
    x.sort_by(f64::total_cmp);
    let y = x.iter().map(|v| 0.5 * v + rng.random::<f64>() - 0.5).collect();
    let data = Dataset::new(x, y).unwrap();
    let inducing: Vec<Point> = (0..m)
        .map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>() * flow_time])
        .collect();
    let mut q_factor = DMatrix::zeros(m, m);
    for j in 0..m {
        q_factor[(j, j)] = 0.3 + 0.5 * rng.random::<f64>();
        for i in j + 1..m {
            q_factor[(i, j)] = 0.4 * (rng.random::<f64>() - 0.5);
        }
    }
    let variant = if seed % 2 == 0 {
        KernelVariant::SquaredExponential
    } else {
        KernelVariant::Matern32Ard
    };
    let model = FlowModel {
        kernel: KernelParams::new(
            variant,
            0.5 + rng.random::<f64>(),
            [1.0 + rng.random::<f64>(), 0.5 + rng.random::<f64>()],
        )
        .unwrap(),
        inducing,
        q_mean: DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 - 1.0),
        q_factor,
        noise_variance: 0.2 + rng.random::<f64>(),
        flow_time,
        n_steps,
        diffusion: DiffusionMode::Joint,
        seed,
    };
    let noise = PathNoise::draw_many(&mut rng, &model, n, 2);
    (model, data, noise)
}

/// Block of each free-parameter index.
pub fn block_of(m: usize, idx: usize) -> usize {
    let sizes = [m, m * (m + 1) / 2, 2 * m, 3, 1];
    let mut acc = 0;
    for (b, s) in sizes.iter().enumerate() {
        acc += s;
        if idx < acc {
            return b;
        }
    }
    unreachable!()
}

/// Relative error `‖analytic − fd‖ / ‖fd‖` per parameter block, with central differences.
pub fn gradient_errors(model: &FlowModel, data: &Dataset, noise: &[PathNoise], h: f64) -> [f64; 5] {
    let (_, grad) = elbo_grad_with_noise(model, data, noise).unwrap();
    let analytic = grad.flatten();
    let theta = model.free_params();
    let mut diff = [0.0; 5];
    let mut norm = [0.0; 5];
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let fp = elbo_terms(&model.with_free_params(&tp), data, noise).unwrap().elbo;
        let fm = elbo_terms(&model.with_free_params(&tm), data, noise).unwrap().elbo;
        let fd = (fp - fm) / (2.0 * h);
        let b = block_of(model.n_inducing(), i);
        diff[b] += (analytic[i] - fd).powi(2);
        norm[b] += fd * fd;
    }
    let mut out = [0.0; 5];
    for b in 0..5 {
        out[b] = diff[b].sqrt() / norm[b].sqrt().max(1e-12);
    }
    out
}

/// Random untrained model whose field is smooth relative to the solver step, so that
/// ordering is decided by coherence of the increments and not by discretization.
pub fn smooth_model(seed: u64, m: usize, diffusion: DiffusionMode) -> FlowModel {
    let mut rng = rng_from_seed(seed);
    let flow_time = 0.5 + 2.0 * rng.random::<f64>();
    let inducing: Vec<Point> = (0..m)
        .map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * flow_time])
        .collect();
    let mut q_factor = DMatrix::zeros(m, m);
    for j in 0..m {
        q_factor[(j, j)] = 0.05 + 0.3 * rng.random::<f64>();
        for i in j + 1..m {
            q_factor[(i, j)] = 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
    let variant = if seed % 2 == 0 {
        KernelVariant::SquaredExponential
    } else {
        KernelVariant::Matern32Ard
    };
    FlowModel {
        kernel: KernelParams::new(
            variant,
            0.2 + 0.5 * rng.random::<f64>(),
            [2.0 + 3.0 * rng.random::<f64>(), flow_time * (0.3 + rng.random::<f64>())],
        )
        .unwrap(),
        inducing,
        q_mean: DVector::from_fn(m, |_, _| 2.0 * rng.random::<f64>() - 1.0),
        q_factor,
        noise_variance: 0.5,
        flow_time,
        n_steps: 20,
        diffusion,
        seed,
    }
}

/// Particles packed far tighter than the field's lengthscale, with inducing inputs far
/// away so the diffusion is close to the prior. Each marginal increment is large, but
/// the joint increment is nearly identical across particles.
pub fn adversarial_model(diffusion: DiffusionMode) -> (FlowModel, Vec<f64>) {
    let m = 4;
    let model = FlowModel {
        kernel: KernelParams::new(KernelVariant::SquaredExponential, 1.0, [3.0, 1.0]).unwrap(),
        inducing: (0..m).map(|i| [100.0 + i as f64, 0.5]).collect(),
        q_mean: DVector::zeros(m),
        q_factor: DMatrix::identity(m, m) * 0.1,
        noise_variance: 0.5,
        flow_time: 1.0,
        n_steps: 20,
        diffusion,
        seed: 0,
    };
    let x0 = (0..40).map(|i| 5.0 + 1e-3 * i as f64).collect();
    (model, x0)
}

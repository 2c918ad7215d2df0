use nalgebra::{DMatrix, DVector};

use crate::data::{variance, Dataset};
use crate::error::{Error, Result};
use crate::flow::{DiffusionMode, FlowModel, DEFAULT_STEPS};
use crate::gp::{KernelParams, KernelVariant, Point};

/// Noise variance used when the targets have no spread at all.
const FLAT_TARGET_NOISE: f64 = 1e-3;

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

/// Starting point for training: the flow is the identity in expectation.
///
/// Inducing inputs form a grid over `[min x, max x] × [0, T]` with `⌈√M⌉` points per axis,
/// filled time-major and truncated to `M`. The variational posterior starts at zero mean
/// with a small isotropic factor. `seed` is only recorded.
pub fn init_model(data: &Dataset, n_inducing: usize, flow_time: f64, variant: KernelVariant, seed: u64) -> Result<FlowModel> {
    if n_inducing < 2 {
        return Err(Error::invalid("at least two inducing points are required"));
    }
    if !(flow_time > 0.0 && flow_time.is_finite()) {
        return Err(Error::invalid("flow time must be positive"));
    }
    let (lo, hi) = data.x_range().ok_or_else(|| Error::invalid("dataset is empty"))?;
    if hi <= lo {
        return Err(Error::invalid("inputs must not all be equal"));
    }
    let k = (n_inducing as f64).sqrt().ceil() as usize;
    let space = linspace(lo, hi, k);
    let time = linspace(0.0, flow_time, k);
    let inducing: Vec<Point> = time
        .iter()
        .flat_map(|&t| space.iter().map(move |&s| [s, t]))
        .take(n_inducing)
        .collect();
    let kernel = KernelParams::new(variant, 1.0, [(hi - lo) / 2.0, flow_time / 2.0])?;
    let var_y = variance(&data.y);
    let noise_variance = if var_y > 0.0 { 0.1 * var_y } else { FLAT_TARGET_NOISE };
    Ok(FlowModel {
        q_factor: DMatrix::identity(n_inducing, n_inducing) * (1e-2 * kernel.signal_variance().sqrt()),
        kernel,
        inducing,
        q_mean: DVector::zeros(n_inducing),
        noise_variance,
        flow_time,
        n_steps: DEFAULT_STEPS,
        diffusion: DiffusionMode::Joint,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        let x: Vec<f64> = (1..=100).map(|i| i as f64 / 10.0).collect();
        let y = x.iter().map(|v| v * 0.3).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn grid_layout() {
        let m = init_model(&data(), 40, 1.0, KernelVariant::SquaredExponential, 0).unwrap();
        assert_eq!(m.inducing.len(), 40);
        assert_eq!(m.inducing[0], [0.1, 0.0]);
        assert_eq!(m.inducing[6], [10.0, 0.0]);
        assert_eq!(m.inducing[7][1], 1.0 / 6.0);
        assert!(m.inducing.iter().all(|z| z[1] >= 0.0 && z[1] <= 1.0));
        assert!(m.q_mean.iter().all(|v| *v == 0.0));
        assert_eq!(m.kernel.lengthscales(), [4.95, 0.5]);
        m.validate().unwrap();
    }

    #[test]
    fn seed_is_only_recorded() {
        let a = init_model(&data(), 10, 5.0, KernelVariant::Matern32Ard, 1).unwrap();
        let b = init_model(&data(), 10, 5.0, KernelVariant::Matern32Ard, 2).unwrap();
        assert_eq!(FlowModel { seed: 1, ..b }, a);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let d = Dataset::new(vec![2.0, 2.0], vec![0.0, 1.0]).unwrap();
        assert!(init_model(&d, 4, 1.0, KernelVariant::SquaredExponential, 0).is_err());
        assert!(init_model(&data(), 1, 1.0, KernelVariant::SquaredExponential, 0).is_err());
    }

    #[test]
    fn flat_targets_get_a_floor() {
        let d = Dataset::new(vec![0.0, 1.0, 2.0], vec![1.0; 3]).unwrap();
        let m = init_model(&d, 4, 1.0, KernelVariant::SquaredExponential, 0).unwrap();
        assert_eq!(m.noise_variance, FLAT_TARGET_NOISE);
    }
}

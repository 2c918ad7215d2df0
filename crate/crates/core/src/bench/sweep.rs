use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{predict, Prediction, DEFAULT_STEPS};
use crate::gp::KernelVariant;
use crate::rng::SeedStream;
use crate::train::{fit, init_model, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kernel: KernelVariant,
    pub optimizer: OptimizerConfig,
    pub n_steps: usize,
    /// Coherent draws behind each band.
    pub n_samples: usize,
    /// Inputs at which bands are exported.
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kernel: KernelVariant::SquaredExponential,
            optimizer: OptimizerConfig::default(),
            n_steps: DEFAULT_STEPS,
            n_samples: 200,
            grid: (0..=100).map(|i| -5.0 + 0.1 * i as f64).collect(),
            seed: 0,
        }
    }
}

/// Mean ± 2 empirical SD of the fitted flow for one (M, T) setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBand {
    pub n_inducing: usize,
    pub flow_time: f64,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Band width at each training input.
    pub width_at_data: Vec<f64>,
    pub noise_variance: f64,
    /// Every draw on the export grid was nondecreasing.
    pub all_monotone: bool,
}

impl SweepBand {
    pub fn mean_width(&self) -> f64 {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum::<f64>() / self.x.len() as f64
    }

    pub fn mean_width_at_data(&self) -> f64 {
        self.width_at_data.iter().sum::<f64>() / self.width_at_data.len() as f64
    }
}

fn two_sd(p: &Prediction) -> (Vec<f64>, Vec<f64>) {
    let lower = p.mean.iter().zip(&p.sd).map(|(m, s)| m - 2.0 * s).collect();
    let upper = p.mean.iter().zip(&p.sd).map(|(m, s)| m + 2.0 * s).collect();
    (lower, upper)
}

/// Fits one flow per `(M, T)` pair and summarizes its predictive band.
pub fn uncertainty_sweep(data: &Dataset, m_values: &[usize], t_values: &[f64], cfg: &SweepConfig) -> Result<Vec<SweepBand>> {
    if cfg.grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if cfg.grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("sweep grid must be sorted"));
    }
    let root = SeedStream::new(cfg.seed);
    let mut bands = Vec::new();
    for (i, &m) in m_values.iter().enumerate() {
        for (j, &t) in t_values.iter().enumerate() {
            let node = root.child(i as u64 + 1).child(j as u64 + 1);
            let mut init = init_model(data, m, t, cfg.kernel, node.seed())?;
            init.n_steps = cfg.n_steps;
            let opt = OptimizerConfig {
                seed: node.child(1).seed(),
                ..cfg.optimizer.clone()
            };
            let (model, _) = fit(data, &init, &opt)?;
            let on_grid = predict(&model, &cfg.grid, cfg.n_samples, &mut node.child(2).rng())?;
            let at_data = predict(&model, &data.x, cfg.n_samples, &mut node.child(3).rng())?;
            let all_monotone = on_grid
                .samples
                .row_iter()
                .all(|r| r.iter().zip(r.iter().skip(1)).all(|(a, b)| *b >= *a - 1e-9));
            let (lower, upper) = two_sd(&on_grid);
            let (dl, du) = two_sd(&at_data);
            bands.push(SweepBand {
                n_inducing: m,
                flow_time: t,
                x: cfg.grid.clone(),
                mean: on_grid.mean,
                lower,
                upper,
                width_at_data: du.iter().zip(&dl).map(|(u, l)| u - l).collect(),
                noise_variance: model.noise_variance,
                all_monotone,
            });
        }
    }
    Ok(bands)
}

/// Long-format CSV `M,T,x,mean,lower,upper`.
pub fn bands_to_csv(bands: &[SweepBand]) -> String {
    let mut out = String::from("M,T,x,mean,lower,upper\n");
    for b in bands {
        for k in 0..b.x.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.n_inducing, b.flow_time, b.x[k], b.mean[k], b.lower[k], b.upper[k]
            ));
        }
    }
    out
}

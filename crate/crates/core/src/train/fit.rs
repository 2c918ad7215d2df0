use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::optim::maximize;
use crate::rng::SeedStream;

use super::elbo::{elbo_grad, elbo_terms, PathNoise};
use super::{OptimizerConfig, TraceRecord};

/// Bound on every log-scale parameter during optimization.
pub(crate) const LOG_PARAM_BOUND: f64 = 18.0;

const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

/// The fixed path noise behind the validation ELBO of a run with `cfg`.
pub fn validation_noise(model: &FlowModel, n: usize, cfg: &OptimizerConfig) -> Vec<PathNoise> {
    let mut rng = SeedStream::new(cfg.seed).child(VALIDATION_STREAM).rng();
    PathNoise::draw_many(&mut rng, model, n, cfg.validation_samples)
}

/// Maximizes the Monte-Carlo ELBO over all free parameters with Adam and the plateau
/// schedule. Returns the parameters with the best validation ELBO, which is evaluated on
/// path noise drawn once from a stream fixed by `cfg.seed`.
pub fn fit(data: &Dataset, init: &FlowModel, cfg: &OptimizerConfig) -> Result<(FlowModel, TraceRecord)> {
    init.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut train_rng = SeedStream::new(cfg.seed).child(TRAIN_STREAM).rng();
    let validation_noise = validation_noise(init, data.len(), cfg);

    let outcome = maximize(
        init.free_params(),
        cfg,
        |_, theta| {
            let model = init.with_free_params(theta);
            let (value, grad) = elbo_grad(&model, data, cfg.n_elbo_samples, &mut train_rng)?;
            Ok((value, grad.flatten()))
        },
        |theta| Ok(elbo_terms(&init.with_free_params(theta), data, &validation_noise)?.elbo),
        |theta| init.project_free_params(theta, LOG_PARAM_BOUND),
    )?;
    Ok((init.with_free_params(&outcome.best), outcome.trace))
}

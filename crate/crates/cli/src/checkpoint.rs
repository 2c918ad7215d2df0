//! Checkpoint format, schema version 1.
//!
//! A single JSON document. Every model float is stored as a base64 string of
//! little-endian `f64` bytes so a reload is bit-exact; `summary` repeats the headline
//! numbers in plain JSON for people reading the file.
//!
//! Layouts: `inducing` is row-major `[space, time]` pairs, `q_factor` is the full
//! M×M matrix in column-major order.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use monoflow::flow::{DiffusionMode, FlowModel};
use monoflow::gp::{KernelParams, KernelVariant};
use monoflow::train::TraceRecord;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::csvio::{read_text, write_file};
use crate::error::{CliError, CliResult};
use crate::provenance::digest;

pub const SCHEMA_VERSION: u32 = 1;
pub const FORMAT: &str = "monoflow-checkpoint";

/// Everything that determines a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// SHA-256 of the training data as canonical JSON.
    pub data_digest: String,
    pub seed: u64,
    pub iters: usize,
    pub learning_rate: f64,
    pub n_inducing: usize,
    pub flow_time: f64,
    pub kernel: KernelVariant,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub kernel: KernelVariant,
    pub n_inducing: usize,
    pub flow_time: f64,
    pub n_steps: usize,
    pub diffusion: DiffusionMode,
    pub init_seed: u64,
    pub log_signal_variance: String,
    pub log_lengthscales: String,
    pub noise_variance: String,
    pub inducing: String,
    pub q_mean: String,
    pub q_factor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: usize,
    pub final_elbo: Option<f64>,
    pub best_iteration: usize,
    pub best_validation: Option<f64>,
    pub final_learning_rate: Option<f64>,
    pub noise_variance: f64,
    pub signal_variance: f64,
    pub lengthscales: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub schema_version: u32,
    pub config_digest: String,
    pub master_seed: u64,
    pub config: FitConfig,
    /// Range of the training inputs; default prediction grids span it.
    pub data_range: [f64; 2],
    pub model: ModelRecord,
    pub summary: FitSummary,
}

pub fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode(field: &str, s: &str, expected: usize) -> CliResult<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| CliError::Usage(format!("checkpoint field `{field}`: {e}")))?;
    if bytes.len() != 8 * expected {
        return Err(CliError::Usage(format!(
            "checkpoint field `{field}` holds {} bytes, expected {}",
            bytes.len(),
            8 * expected
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Checkpoint {
    pub fn new(config: FitConfig, data_range: [f64; 2], model: &FlowModel, trace: &TraceRecord) -> Self {
        let inducing: Vec<f64> = model.inducing.iter().flat_map(|z| *z).collect();
        Checkpoint {
            format: FORMAT.to_string(),
            schema_version: SCHEMA_VERSION,
            config_digest: digest(&config),
            master_seed: config.seed,
            data_range,
            model: ModelRecord {
                kernel: model.kernel.variant,
                n_inducing: model.n_inducing(),
                flow_time: model.flow_time,
                n_steps: model.n_steps,
                diffusion: model.diffusion,
                init_seed: model.seed,
                log_signal_variance: encode(&[model.kernel.log_signal_variance()]),
                log_lengthscales: encode(&model.kernel.log_lengthscales()),
                noise_variance: encode(&[model.noise_variance]),
                inducing: encode(&inducing),
                q_mean: encode(model.q_mean.as_slice()),
                q_factor: encode(model.q_factor.as_slice()),
            },
            summary: FitSummary {
                iterations: trace.iterations(),
                final_elbo: trace.elbo.iter().rev().copied().find(|v| v.is_finite()),
                best_iteration: trace.best_iteration,
                best_validation: finite(trace.best_validation),
                final_learning_rate: trace.final_learning_rate(),
                noise_variance: model.noise_variance,
                signal_variance: model.kernel.signal_variance(),
                lengthscales: model.kernel.lengthscales(),
            },
            config,
        }
    }

    pub fn model(&self) -> CliResult<FlowModel> {
        let r = &self.model;
        let m = r.n_inducing;
        let lsv = decode("log_signal_variance", &r.log_signal_variance, 1)?[0];
        let lls = decode("log_lengthscales", &r.log_lengthscales, 2)?;
        let z = decode("inducing", &r.inducing, 2 * m)?;
        let model = FlowModel {
            kernel: KernelParams::from_log(r.kernel, lsv, [lls[0], lls[1]]),
            inducing: z.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            q_mean: DVector::from_vec(decode("q_mean", &r.q_mean, m)?),
            q_factor: DMatrix::from_vec(m, m, decode("q_factor", &r.q_factor, m * m)?),
            noise_variance: decode("noise_variance", &r.noise_variance, 1)?[0],
            flow_time: r.flow_time,
            n_steps: r.n_steps,
            diffusion: r.diffusion,
            seed: r.init_seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> CliResult<Checkpoint> {
        let text = read_text(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::format(path, format!("not a checkpoint: {e}")))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if value.get("format").and_then(|v| v.as_str()) != Some(FORMAT) {
            return Err(CliError::format(path, "not a monoflow checkpoint"));
        }
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(CliError::format(
                path,
                format!(
                    "unsupported checkpoint schema version {} (this build reads version {SCHEMA_VERSION})",
                    version.map_or("missing".to_string(), |v| v.to_string())
                ),
            ));
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| CliError::format(path, e.to_string()))?;
        if digest(&ck.config) != ck.config_digest {
            return Err(CliError::format(path, "config digest does not match the embedded config"));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bitwise() {
        let v = [0.1, -0.0, f64::MIN_POSITIVE, 1e308, 1.0 / 3.0, f64::NAN];
        let back = decode("v", &encode(&v), v.len()).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode("v", &encode(&v), 5).is_err());
    }

    #[test]
    fn little_endian_layout() {
        assert_eq!(encode(&[1.0]), STANDARD.encode(1.0f64.to_le_bytes()));
        assert_eq!(encode(&[1.0]), "AAAAAAAA8D8=");
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mean, sample_sd, variance, Dataset};
use crate::error::{Error, Result};
use crate::flow::{predict, FlowModel, DEFAULT_STEPS};
use crate::gp::{exact_gp_fit, ExactGpModel, KernelParams, KernelVariant};
use crate::rng::SeedStream;
use crate::train::{elbo_terms, fit, init_model, validation_noise, OptimizerConfig};

use super::dataset::{make_dataset, truth};
use super::functions::BenchmarkFunction;
use super::metrics::{elpd, rmse};

/// One model configuration tried on every trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub flow_time: f64,
    pub kernel: KernelVariant,
    pub n_inducing: usize,
}

impl GridEntry {
    pub fn label(&self) -> String {
        format!("T{}-{}-M{}", self.flow_time, self.kernel.short_name(), self.n_inducing)
    }
}

/// `T ∈ {1, 5}`, both kernels, 40 inducing points.
pub fn default_grid() -> Vec<GridEntry> {
    let mut grid = Vec::new();
    for flow_time in [1.0, 5.0] {
        for kernel in [KernelVariant::SquaredExponential, KernelVariant::Matern32Ard] {
            grid.push(GridEntry {
                flow_time,
                kernel,
                n_inducing: 40,
            });
        }
    }
    grid
}

/// Everything that determines a benchmark's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub functions: Vec<BenchmarkFunction>,
    pub n_points: usize,
    pub n_trials: usize,
    pub noise_sd: f64,
    pub grid: Vec<GridEntry>,
    pub n_steps: usize,
    pub optimizer: OptimizerConfig,
    pub master_seed: u64,
    /// Draws behind the predictive mean used for RMSE.
    pub predict_samples: usize,
    pub elpd_samples: usize,
    /// Also fit the exact-GP baseline on every trial.
    pub exact_gp: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            functions: BenchmarkFunction::ALL.to_vec(),
            n_points: 100,
            n_trials: 20,
            noise_sd: 1.0,
            grid: default_grid(),
            n_steps: DEFAULT_STEPS,
            optimizer: OptimizerConfig::default(),
            master_seed: 0,
            predict_samples: 200,
            elpd_samples: 200,
            exact_gp: false,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.functions.is_empty() || self.grid.is_empty() {
            return Err(Error::invalid("benchmark needs at least one function and one grid entry"));
        }
        if self.n_trials == 0 {
            return Err(Error::invalid("at least one trial is required"));
        }
        if self.n_points < 2 || self.n_steps == 0 {
            return Err(Error::invalid("need at least two points and one solver step"));
        }
        if self.predict_samples < 2 || self.elpd_samples < 100 {
            return Err(Error::invalid("need ≥ 2 prediction samples and ≥ 100 ELPD samples"));
        }
        self.optimizer.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(canonical_json(self).as_bytes()))
    }

    /// Seeds of one trial, derived from the master seed.
    pub fn trial_seeds(&self, function: BenchmarkFunction, trial: usize) -> TrialSeeds {
        let node = SeedStream::new(self.master_seed)
            .child(function.index() as u64 + 1)
            .child(trial as u64 + 1);
        TrialSeeds {
            data: node.child(1).seed(),
            fit: node.child(2).seed(),
            predict: node.child(3).seed(),
            test_data: node.child(4).seed(),
            elpd: node.child(5).seed(),
        }
    }
}

/// Serializes with object keys sorted at every level.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("serializable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSeeds {
    pub data: u64,
    pub fit: u64,
    pub predict: u64,
    pub test_data: u64,
    pub elpd: u64,
}

/// Outcome of one grid entry on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub entry: GridEntry,
    pub validation_elbo: Option<f64>,
    /// Against the noiseless function, ×100.
    pub rmse: Option<f64>,
    /// Against the held-out noisy observations, ×100.
    pub rmse_noisy: Option<f64>,
    pub elpd: Option<f64>,
    pub noise_variance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub function: BenchmarkFunction,
    pub trial: usize,
    pub seeds: TrialSeeds,
    pub config_digest: String,
    pub entries: Vec<EntryResult>,
    /// Grid index with the best validation ELBO.
    pub selected: Option<usize>,
    pub exact_gp_rmse: Option<f64>,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.selected.is_none()
    }

    fn selected_entry(&self) -> Option<&EntryResult> {
        self.selected.map(|i| &self.entries[i])
    }

    /// RMSE×100 of the selected entry.
    pub fn rmse(&self) -> Option<f64> {
        self.selected_entry().and_then(|e| e.rmse)
    }

    pub fn elpd(&self) -> Option<f64> {
        self.selected_entry().and_then(|e| e.elpd)
    }

    /// Lowest RMSE×100 over the grid.
    pub fn best_rmse(&self) -> Option<f64> {
        self.entries.iter().filter_map(|e| e.rmse).min_by(f64::total_cmp)
    }
}

/// Mean and sample SD over successful trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        (!values.is_empty()).then(|| Summary {
            mean: mean(values),
            sd: sample_sd(values),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionAggregate {
    pub function: BenchmarkFunction,
    pub trials: usize,
    pub failed: usize,
    /// Grid entry chosen per trial by validation ELBO.
    pub rmse: Option<Summary>,
    pub elpd: Option<Summary>,
    /// Per-trial minimum RMSE over the grid.
    pub best_rmse_per_trial: Option<Summary>,
    /// The single grid entry with the lowest mean RMSE for this function.
    pub best_entry: Option<usize>,
    pub best_entry_rmse: Option<Summary>,
    /// ELPD of that same entry.
    pub best_entry_elpd: Option<Summary>,
    pub exact_gp_rmse: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub config_digest: String,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<FunctionAggregate>,
}

fn aggregate(function: BenchmarkFunction, rows: &[&TrialRecord], grid_len: usize) -> FunctionAggregate {
    let ok: Vec<&&TrialRecord> = rows.iter().filter(|r| !r.failed()).collect();
    let collect = |f: &dyn Fn(&TrialRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    let per_entry: Vec<Option<Summary>> = (0..grid_len)
        .map(|i| Summary::of(&collect(&|r| r.entries[i].rmse)).filter(|s| s.n == ok.len()))
        .collect();
    let best_entry = per_entry
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s.mean)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    FunctionAggregate {
        function,
        trials: rows.len(),
        failed: rows.len() - ok.len(),
        rmse: Summary::of(&collect(&|r| r.rmse())),
        elpd: Summary::of(&collect(&|r| r.elpd())),
        best_rmse_per_trial: Summary::of(&collect(&|r| r.best_rmse())),
        best_entry,
        best_entry_rmse: best_entry.and_then(|i| per_entry[i]),
        best_entry_elpd: best_entry.and_then(|i| Summary::of(&collect(&|r| r.entries[i].elpd))),
        exact_gp_rmse: Summary::of(&rows.iter().filter_map(|r| r.exact_gp_rmse).collect::<Vec<_>>()),
    }
}

impl BenchmarkReport {
    pub fn assemble(config: BenchmarkConfig, mut trials: Vec<TrialRecord>) -> Self {
        trials.sort_by_key(|t| (t.function.index(), t.trial));
        let aggregates = config
            .functions
            .iter()
            .map(|&f| {
                let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.function == f).collect();
                aggregate(f, &rows, config.grid.len())
            })
            .collect();
        BenchmarkReport {
            config_digest: config.digest(),
            config,
            trials,
            aggregates,
        }
    }

    /// Recomputes the aggregates from the trial rows.
    pub fn recompute_aggregates(&self) -> Vec<FunctionAggregate> {
        BenchmarkReport::assemble(self.config.clone(), self.trials.clone()).aggregates
    }

    pub fn aggregate_for(&self, function: BenchmarkFunction) -> Option<&FunctionAggregate> {
        self.aggregates.iter().find(|a| a.function == function)
    }

    pub fn n_failed(&self) -> usize {
        self.trials.iter().filter(|t| t.failed()).count()
    }

    pub fn success_fraction(&self) -> f64 {
        if self.trials.is_empty() {
            return 0.0;
        }
        1.0 - self.n_failed() as f64 / self.trials.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// One row per function × trial.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "function,trial,data_seed,selected,rmse_x100,best_rmse_x100,rmse_noisy_x100,elpd,noise_variance,exact_gp_rmse_x100,failed,config_digest\n",
        );
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for t in &self.trials {
            let sel = t.selected_entry();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                t.function,
                t.trial,
                t.seeds.data,
                sel.map(|e| e.entry.label()).unwrap_or_default(),
                opt(t.rmse()),
                opt(t.best_rmse()),
                opt(sel.and_then(|e| e.rmse_noisy)),
                opt(t.elpd()),
                opt(sel.and_then(|e| e.noise_variance)),
                opt(t.exact_gp_rmse),
                t.failed(),
                t.config_digest,
            ));
        }
        out
    }
}

/// Where per-trial results and final reports live.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Reuse per-trial records already on disk with a matching digest.
    pub resume: bool,
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: None,
            resume: true,
            jobs: 1,
        }
    }
}

pub fn trial_path(out: &Path, function: BenchmarkFunction, trial: usize) -> PathBuf {
    out.join(function.name()).join(format!("{trial}.json"))
}

/// Writes through a temporary file and a rename, so readers never see partial files.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_trial(path: &Path, digest: &str) -> Option<TrialRecord> {
    let text = fs::read_to_string(path).ok()?;
    let rec: TrialRecord = serde_json::from_str(&text).ok()?;
    (rec.config_digest == digest).then_some(rec)
}

fn exact_gp_rmse(data: &Dataset, f_true: &[f64], seed: u64) -> Result<f64> {
    let (lo, hi) = data.x_range().ok_or_else(|| Error::invalid("dataset is empty"))?;
    let var_y = variance(&data.y).max(1e-6);
    let kernel = KernelParams::new(KernelVariant::SquaredExponential, var_y, [(hi - lo) / 4.0, 1.0])?;
    let init = ExactGpModel::new(kernel, 0.5 * var_y, data)?;
    let cfg = OptimizerConfig {
        learning_rate: 0.05,
        max_iters: 500,
        plateau_patience: 50,
        validate_every: 1,
        seed,
        ..OptimizerConfig::default()
    };
    let model = exact_gp_fit(data, &init, &cfg)?;
    let (m, _) = model.predict(&data.x)?;
    Ok(100.0 * rmse(&m, f_true)?)
}

fn run_entry(cfg: &BenchmarkConfig, entry: &GridEntry, data: &Dataset, test: &Dataset, f_true: &[f64], seeds: &TrialSeeds) -> Result<EntryResult> {
    let mut init = init_model(data, entry.n_inducing, entry.flow_time, entry.kernel, seeds.fit)?;
    init.n_steps = cfg.n_steps;
    let opt = OptimizerConfig {
        seed: seeds.fit,
        ..cfg.optimizer.clone()
    };
    let (model, trace) = fit(data, &init, &opt)?;
    let p = predict(&model, &data.x, cfg.predict_samples, &mut SeedStream::new(seeds.predict).rng())?;
    let e = elpd(&model, test, cfg.elpd_samples, &mut SeedStream::new(seeds.elpd).rng())?;
    Ok(EntryResult {
        entry: *entry,
        validation_elbo: Some(trace.best_validation),
        rmse: Some(100.0 * rmse(&p.mean, f_true)?),
        rmse_noisy: Some(100.0 * rmse(&p.mean, &test.y)?),
        elpd: Some(e),
        noise_variance: Some(model.noise_variance),
        error: None,
    })
}

/// Fits every grid entry on one trial's data and selects by validation ELBO.
pub fn run_trial(cfg: &BenchmarkConfig, function: BenchmarkFunction, trial: usize) -> Result<TrialRecord> {
    let seeds = cfg.trial_seeds(function, trial);
    let data = make_dataset(function, cfg.n_points, cfg.noise_sd, seeds.data)?;
    let test = make_dataset(function, cfg.n_points, cfg.noise_sd, seeds.test_data)?;
    let f_true = truth(function, &data);
    let entries: Vec<EntryResult> = cfg
        .grid
        .iter()
        .map(|entry| {
            run_entry(cfg, entry, &data, &test, &f_true, &seeds).unwrap_or_else(|e| {
                log::warn!("{function} trial {trial} {}: {e}", entry.label());
                EntryResult {
                    entry: *entry,
                    validation_elbo: None,
                    rmse: None,
                    rmse_noisy: None,
                    elpd: None,
                    noise_variance: None,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    let selected = entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.validation_elbo.filter(|v| v.is_finite()).map(|v| (i, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    let exact_gp_rmse = if cfg.exact_gp {
        exact_gp_rmse(&data, &f_true, seeds.fit)
            .inspect_err(|e| log::warn!("{function} trial {trial} exact GP: {e}"))
            .ok()
    } else {
        None
    };
    Ok(TrialRecord {
        function,
        trial,
        seeds,
        config_digest: cfg.digest(),
        entries,
        selected,
        exact_gp_rmse,
    })
}

/// Wall-clock seconds per trial, kept apart from the report so reports stay
/// reproducible bit for bit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub trials: Vec<(BenchmarkFunction, usize, f64)>,
}

/// Runs (or resumes) every function × trial, writing per-trial records under
/// `<out>/<function>/<trial>.json` and the final `report.json` / `report.csv`.
///
/// Training failures are recorded in the trial rows; they never abort the sweep.
pub fn run_benchmark(cfg: &BenchmarkConfig, opts: &RunOptions) -> Result<(BenchmarkReport, Timings)> {
    cfg.validate()?;
    let digest = cfg.digest();
    let jobs: Vec<(BenchmarkFunction, usize)> = cfg
        .functions
        .iter()
        .flat_map(|&f| (0..cfg.n_trials).map(move |t| (f, t)))
        .collect();
    let work = |&(f, t): &(BenchmarkFunction, usize)| -> Result<(TrialRecord, Option<f64>)> {
        if let Some(out) = &opts.out_dir {
            let path = trial_path(out, f, t);
            if opts.resume {
                if let Some(rec) = load_trial(&path, &digest) {
                    log::info!("{f} trial {t}: reused {}", path.display());
                    return Ok((rec, None));
                }
            }
        }
        let start = Instant::now();
        let rec = run_trial(cfg, f, t)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("{f} trial {t}: rmse×100 {:?} in {secs:.1}s", rec.rmse());
        if let Some(out) = &opts.out_dir {
            write_atomic(&trial_path(out, f, t), (serde_json::to_string_pretty(&rec)? + "\n").as_bytes())?;
        }
        Ok((rec, Some(secs)))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let results: Vec<Result<(TrialRecord, Option<f64>)>> = pool.install(|| jobs.par_iter().map(work).collect());
    let mut trials = Vec::with_capacity(results.len());
    let mut timings = Timings::default();
    for r in results {
        let (rec, secs) = r?;
        if let Some(s) = secs {
            timings.trials.push((rec.function, rec.trial, s));
        }
        trials.push(rec);
    }
    let report = BenchmarkReport::assemble(cfg.clone(), trials);
    if let Some(out) = &opts.out_dir {
        write_atomic(&out.join("report.json"), report.to_json().as_bytes())?;
        write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
        if !timings.trials.is_empty() {
            write_atomic(&out.join("timings.json"), serde_json::to_string_pretty(&timings)?.as_bytes())?;
        }
    }
    Ok((report, timings))
}

/// Re-fits one trial's selected entry and returns the model, for inspection and
/// regeneration checks.
pub fn refit_selected(cfg: &BenchmarkConfig, record: &TrialRecord) -> Result<FlowModel> {
    let idx = record
        .selected
        .ok_or_else(|| Error::invalid("trial has no selected grid entry"))?;
    let entry = record.entries[idx].entry;
    let data = make_dataset(record.function, cfg.n_points, cfg.noise_sd, record.seeds.data)?;
    let mut init = init_model(&data, entry.n_inducing, entry.flow_time, entry.kernel, record.seeds.fit)?;
    init.n_steps = cfg.n_steps;
    let opt = OptimizerConfig {
        seed: record.seeds.fit,
        ..cfg.optimizer.clone()
    };
    Ok(fit(&data, &init, &opt)?.0)
}

/// Validation ELBO of a model on fixed noise, as used for grid selection.
pub fn validation_elbo(model: &FlowModel, data: &Dataset, opt: &OptimizerConfig) -> Result<f64> {
    Ok(elbo_terms(model, data, &validation_noise(model, data.len(), opt))?.elbo)
}

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use monoflow::bench::{
    run_benchmark, sinc_dataset, uncertainty_sweep, BenchmarkConfig, BenchmarkFunction, BenchmarkReport, GridEntry,
    Reference, RunOptions, SweepBand, SweepConfig, PUBLISHED_ELPD_N100, PUBLISHED_RMSE_N100, PUBLISHED_RMSE_N15,
};
use monoflow::flow::{predict, sample_flow, streamlines, DEFAULT_STEPS};
use monoflow::gp::KernelVariant;
use monoflow::rng::rng_from_seed;
use monoflow::train::{fit, init_model, OptimizerConfig, TraceRecord};
use monoflow::Dataset;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, FitConfig};
use crate::csvio::{
    dataset_csv, inducing_csv, linspace, parse_grid, predict_csv, read_dataset, read_inputs, samples_csv, streamlines_csv,
    write_file,
};
use crate::error::{CliError, CliResult};
use crate::provenance::{digest, digest_bytes, Provenance};

#[derive(Debug, Parser)]
#[command(name = "monoflow", version, about = "Monotonic regression with GP-driven SDE flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a flow to an `x,y` CSV and write a checkpoint.
    Fit(FitArgs),
    /// Predictive mean and 95% interval on a grid.
    Predict(PredictArgs),
    /// Export individual coherent sample curves.
    Sample(PredictArgs),
    /// Export particle trajectories of coherent draws.
    Streamlines(PredictArgs),
    /// Run the benchmark protocol over the six test functions.
    Benchmark(BenchmarkArgs),
    /// Fit the sinc data for several (M, T) settings and export uncertainty bands.
    Sweep(SweepArgs),
    /// Write a benchmark dataset as `x,y` CSV.
    Dataset(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training data, CSV with header `x,y`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Number of inducing points.
    #[arg(long = "M", default_value_t = 40)]
    pub m: usize,
    /// Flow time.
    #[arg(long = "T", default_value_t = 1.0)]
    pub t: f64,
    #[arg(long, value_enum, default_value_t = KernelArg::Se)]
    pub kernel: KernelArg,
    /// Euler–Maruyama steps.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Inputs as `lo:hi:n`; defaults to 200 points over the training range.
    #[arg(long, conflicts_with = "inputs", allow_hyphen_values = true)]
    pub grid: Option<String>,
    /// CSV with an `x` column.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Number of coherent draws.
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the checkpoint's solver steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated function names; all six by default.
    #[arg(long, value_delimiter = ',')]
    pub functions: Vec<BenchmarkFunction>,
    #[arg(long = "N", default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Inducing-point counts of the grid.
    #[arg(long = "M", value_delimiter = ',', default_values_t = [40])]
    pub m: Vec<usize>,
    /// Flow times of the grid.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [1.0, 5.0])]
    pub t: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [KernelArg::Se, KernelArg::Matern32])]
    pub kernel: Vec<KernelArg>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Draws behind the predictive mean and behind the ELPD.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Also fit the exact-GP baseline.
    #[arg(long)]
    pub exact_gp: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent trials; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse trial records already in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Data as `x,y` CSV; defaults to 50 noisy sinc points on [-1, 1].
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long = "M", value_delimiter = ',', default_values_t = [50, 100])]
    pub m: Vec<usize>,
    #[arg(long = "T", value_delimiter = ',', default_values_t = [1.0, 10.0])]
    pub t: Vec<f64>,
    #[arg(long, value_enum, default_value_t = KernelArg::Se)]
    pub kernel: KernelArg,
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Band inputs as `lo:hi:n`.
    #[arg(long, default_value = "-5:5:101", allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub function: BenchmarkFunction,
    #[arg(long = "N", default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KernelArg {
    Se,
    Matern32,
}

impl From<KernelArg> for KernelVariant {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Se => KernelVariant::SquaredExponential,
            KernelArg::Matern32 => KernelVariant::Matern32Ard,
        }
    }
}

impl std::fmt::Display for KernelArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(KernelVariant::from(*self).short_name())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Streamlines(a) => cmd_streamlines(&a),
        Command::Benchmark(a) => cmd_benchmark(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Dataset(a) => cmd_dataset(&a),
    }
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be positive")))
    }
}

fn nonzero(name: &str, v: usize) -> CliResult<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be at least 1")))
    }
}

fn data_digest(data: &Dataset) -> String {
    digest(&(&data.x, &data.y))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn trace_csv(trace: &TraceRecord) -> String {
    let mut out = String::from("iteration,elbo,learning_rate,validation\n");
    let mut val = trace.validation.iter().peekable();
    for (i, (e, lr)) in trace.elbo.iter().zip(&trace.learning_rate).enumerate() {
        let it = i + 1;
        let v = match val.peek() {
            Some(&&(k, v)) if k == it => {
                val.next();
                v.to_string()
            }
            _ => String::new(),
        };
        out.push_str(&format!("{it},{e},{lr},{v}\n"));
    }
    out
}

pub fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    positive("lr", a.lr)?;
    positive("T", a.t)?;
    nonzero("M", a.m)?;
    nonzero("steps", a.steps)?;
    let data = read_dataset(&a.data)?;
    let config = FitConfig {
        data_digest: data_digest(&data),
        seed: a.seed,
        iters: a.iters,
        learning_rate: a.lr,
        n_inducing: a.m,
        flow_time: a.t,
        kernel: a.kernel.into(),
        n_steps: a.steps,
    };
    create_out(&a.out)?;
    let mut init = init_model(&data, a.m, a.t, a.kernel.into(), a.seed)?;
    init.n_steps = a.steps;
    let opt = OptimizerConfig {
        learning_rate: a.lr,
        max_iters: a.iters,
        seed: a.seed,
        ..OptimizerConfig::default()
    };
    let start = Instant::now();
    let (model, trace) = fit(&data, &init, &opt)?;
    info!("fit finished in {:.1}s", start.elapsed().as_secs_f64());
    let range = data.x_range().expect("non-empty dataset");
    let ck = Checkpoint::new(config, [range.0, range.1], &model, &trace);
    ck.save(&a.out.join("checkpoint.json"))?;
    write_file(&a.out.join("trace.csv"), &trace_csv(&trace))?;
    let s = &ck.summary;
    let report = format!(
        "iterations: {}\nfinal ELBO: {}\nbest validation ELBO: {} (iteration {})\nnoise variance: {}\nsignal variance: {}\nlengthscales (space, time): {}, {}\nseed: {}\nconfig digest: {}\n",
        s.iterations,
        s.final_elbo.map_or("n/a".into(), |v| v.to_string()),
        s.best_validation.map_or("n/a".into(), |v| v.to_string()),
        s.best_iteration,
        s.noise_variance,
        s.signal_variance,
        s.lengthscales[0],
        s.lengthscales[1],
        ck.master_seed,
        ck.config_digest
    );
    write_file(&a.out.join("fit_report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

#[derive(Serialize)]
struct SamplingConfig<'a> {
    command: &'a str,
    checkpoint_digest: String,
    x: &'a [f64],
    samples: usize,
    seed: u64,
    n_steps: usize,
}

struct Loaded {
    model: monoflow::flow::FlowModel,
    x: Vec<f64>,
    prov: Provenance,
}

fn load_for_sampling(a: &PredictArgs, command: &str) -> CliResult<Loaded> {
    nonzero("samples", a.samples)?;
    let bytes = fs::read(&a.checkpoint).map_err(|e| CliError::io(&a.checkpoint, e))?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut model = ck.model()?;
    if let Some(s) = a.steps {
        nonzero("steps", s)?;
        model.n_steps = s;
    }
    let x = match (&a.grid, &a.inputs) {
        (Some(g), _) => parse_grid(g)?,
        (None, Some(p)) => read_inputs(p)?,
        (None, None) => linspace(ck.data_range[0], ck.data_range[1], 200),
    };
    if x.is_empty() {
        return Err(CliError::Usage("no inputs to evaluate".into()));
    }
    let prov = Provenance::of(
        a.seed,
        &SamplingConfig {
            command,
            checkpoint_digest: digest_bytes(&bytes),
            x: &x,
            samples: a.samples,
            seed: a.seed,
            n_steps: model.n_steps,
        },
    );
    create_out(&a.out)?;
    Ok(Loaded { model, x, prov })
}

/// Outputs are always ordered by `x`.
fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    if a.samples < 2 {
        return Err(CliError::Usage("--samples must be at least 2 for prediction".into()));
    }
    let l = load_for_sampling(a, "predict")?;
    let x = sorted(&l.x);
    let p = predict(&l.model, &x, a.samples, &mut rng_from_seed(a.seed))?;
    write_file(&a.out.join("predict.csv"), &predict_csv(&p, &l.prov))
}

pub fn cmd_sample(a: &PredictArgs) -> CliResult<()> {
    let l = load_for_sampling(a, "sample")?;
    let x = sorted(&l.x);
    let mut rng = rng_from_seed(a.seed);
    let draws = (0..a.samples)
        .map(|_| sample_flow(&l.model, &x, &mut rng))
        .collect::<monoflow::Result<Vec<_>>>()?;
    write_file(&a.out.join("samples.csv"), &samples_csv(&x, &draws, &l.prov))
}

pub fn cmd_streamlines(a: &PredictArgs) -> CliResult<()> {
    let l = load_for_sampling(a, "streamlines")?;
    let draws = streamlines(&l.model, &l.x, a.samples, &mut rng_from_seed(a.seed))?;
    write_file(&a.out.join("streamlines.csv"), &streamlines_csv(&draws, &l.model, &l.prov))?;
    write_file(&a.out.join("inducing.csv"), &inducing_csv(&l.model, &l.prov))
}

fn reference_for(n: usize, f: BenchmarkFunction) -> (Option<Reference>, Option<Reference>) {
    let i = f.index();
    match n {
        100 => (Some(PUBLISHED_RMSE_N100[i]), Some(PUBLISHED_ELPD_N100[i])),
        15 => (Some(PUBLISHED_RMSE_N15[i]), None),
        _ => (None, None),
    }
}

/// The aggregate table printed by `benchmark`, with published reference numbers alongside.
pub fn summary_table(report: &BenchmarkReport) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(
        "function,n,trials,failed,rmse_x100_mean,rmse_x100_sd,best_entry,best_entry_rmse_x100_mean,best_entry_rmse_x100_sd,elpd_mean,elpd_sd,exact_gp_rmse_x100_mean,reference_rmse_x100_mean,reference_rmse_x100_sd,reference_elpd_mean,reference_elpd_sd\n",
    );
    for a in &report.aggregates {
        let (r, e) = reference_for(report.config.n_points, a.function);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            a.function,
            report.config.n_points,
            a.trials,
            a.failed,
            opt(a.rmse.map(|s| s.mean)),
            opt(a.rmse.map(|s| s.sd)),
            a.best_entry.map(|i| report.config.grid[i].label()).unwrap_or_default(),
            opt(a.best_entry_rmse.map(|s| s.mean)),
            opt(a.best_entry_rmse.map(|s| s.sd)),
            opt(a.elpd.map(|s| s.mean)),
            opt(a.elpd.map(|s| s.sd)),
            opt(a.exact_gp_rmse.map(|s| s.mean)),
            opt(r.map(|r| r.0)),
            opt(r.map(|r| r.1)),
            opt(e.map(|e| e.0)),
            opt(e.map(|e| e.1)),
        ));
    }
    out
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> CliResult<()> {
    positive("lr", a.lr)?;
    let mut grid = Vec::new();
    for &flow_time in &a.t {
        positive("T", flow_time)?;
        for &kernel in &a.kernel {
            for &n_inducing in &a.m {
                nonzero("M", n_inducing)?;
                grid.push(GridEntry {
                    flow_time,
                    kernel: kernel.into(),
                    n_inducing,
                });
            }
        }
    }
    let cfg = BenchmarkConfig {
        functions: if a.functions.is_empty() {
            BenchmarkFunction::ALL.to_vec()
        } else {
            a.functions.clone()
        },
        n_points: a.n,
        n_trials: a.trials,
        grid,
        n_steps: a.steps,
        optimizer: OptimizerConfig {
            learning_rate: a.lr,
            max_iters: a.iters,
            ..OptimizerConfig::default()
        },
        master_seed: a.seed,
        predict_samples: a.samples,
        elpd_samples: a.samples,
        exact_gp: a.exact_gp,
        ..BenchmarkConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    nonzero("jobs", jobs)?;
    create_out(&a.out)?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        jobs,
    };
    let (report, timings) = run_benchmark(&cfg, &opts)?;
    info!("benchmark ran {} trials", timings.trials.len());
    print!("{}", summary_table(&report));
    let total = report.trials.len();
    let failed = report.n_failed();
    if report.success_fraction() < 0.8 {
        return Err(CliError::PartialFailure { failed, total });
    }
    if failed > 0 {
        log::warn!("{failed} of {total} trials failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    config: &'a SweepConfig,
    data_digest: String,
    m_values: &'a [usize],
    t_values: &'a [f64],
}

fn sweep_csv(bands: &[SweepBand], prov: &Provenance) -> String {
    let mut out = String::from("M,T,x,mean,lower,upper,seed,config_digest\n");
    for b in bands {
        for k in 0..b.x.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                b.n_inducing, b.flow_time, b.x[k], b.mean[k], b.lower[k], b.upper[k], prov.seed, prov.config_digest
            ));
        }
    }
    out
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    positive("lr", a.lr)?;
    nonzero("steps", a.steps)?;
    if a.samples < 2 {
        return Err(CliError::Usage("--samples must be at least 2".into()));
    }
    a.m.iter().try_for_each(|&m| nonzero("M", m))?;
    a.t.iter().try_for_each(|&t| positive("T", t))?;
    let data = match &a.data {
        Some(p) => read_dataset(p)?,
        None => sinc_dataset(50, 0.02, a.seed)?,
    };
    let cfg = SweepConfig {
        kernel: a.kernel.into(),
        optimizer: OptimizerConfig {
            learning_rate: a.lr,
            max_iters: a.iters,
            ..OptimizerConfig::default()
        },
        n_steps: a.steps,
        n_samples: a.samples,
        grid: parse_grid(&a.grid)?,
        seed: a.seed,
    };
    let record = SweepRecord {
        config: &cfg,
        data_digest: data_digest(&data),
        m_values: &a.m,
        t_values: &a.t,
    };
    let prov = Provenance::of(a.seed, &record);
    create_out(&a.out)?;
    write_file(&a.out.join("data.csv"), &dataset_csv(&data))?;
    let bands = uncertainty_sweep(&data, &a.m, &a.t, &cfg)?;
    write_file(&a.out.join("sweep.csv"), &sweep_csv(&bands, &prov))?;
    write_json(
        &a.out.join("sweep.json"),
        &serde_json::json!({
            "config_digest": prov.config_digest,
            "seed": prov.seed,
            "config": cfg,
            "m_values": a.m,
            "t_values": a.t,
            "bands": bands,
        }),
    )?;
    for b in &bands {
        println!(
            "M={} T={}: mean band width {} (at data {}), all draws monotone: {}",
            b.n_inducing,
            b.flow_time,
            b.mean_width(),
            b.mean_width_at_data(),
            b.all_monotone
        );
    }
    Ok(())
}

pub fn cmd_dataset(a: &DatasetArgs) -> CliResult<()> {
    let data = monoflow::bench::make_dataset(a.function, a.n, a.noise_sd, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    write_file(&a.out, &dataset_csv(&data))
}

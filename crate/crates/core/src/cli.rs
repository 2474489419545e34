//! Command-line harness: experiment wiring, seed handling and artifact output.
//!
//! Every artifact is a deterministic function of the command, its config and
//! its seeds. Wall-clock fields are only recorded under `--timing`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::bnn::{load_csv, run_bnn, synthetic_linear, BnnProtocol, BnnReport, RegressionDataset};
use crate::config::{self, config_hash, SamplerName};
use crate::diagnostics::{format_float, RunReport};
use crate::error::Error;
use crate::samplers::{run, CollectionPolicy, GradientModel, InitConfig, RunConfig, SamplerConfig, SamplerKind, StepSchedule};
use crate::streams::stream;
use crate::targets::{self, Target, TargetSpec};
use crate::vis::{
    optimize, AdMode, DiagonalGaussianGuide, EntropyMode, InnerSampler, OptimizeOutput, OuterOptimizer, RefinedGuide,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "PARTICLE_INFER_OUT";
pub const BENCH_HEADER: &str = "distribution,sampler,seed,ess,ess_per_s,err_ex,err_ex2";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "particle-infer", version, about = "Particle-based Bayesian inference experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Comma-separated seeds; overrides the command's default seed list.
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,
    /// Output directory (default: config value, then $PARTICLE_INFER_OUT, then ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for seed-parallel execution.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Record wall-clock time and ESS per second (makes artifacts non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every (seed, sampler) pair of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Synthetic MoE/MoG comparison of SGLD and SGLD+R.
    BenchSynthetic {
        #[command(flatten)]
        common: Common,
    },
    /// VIS-P on the funnel for T in {0, 1, 2}.
    VisFunnel {
        #[command(flatten)]
        common: Common,
    },
    /// Bayesian neural network regression.
    Bnn {
        /// CSV dataset; a synthetic linear dataset (N = 500) when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Target column of the CSV.
        #[arg(long, default_value = "target")]
        target_column: String,
        /// Comma-separated sampler names.
        #[arg(long, value_delimiter = ',', default_value = "sgld,sgld_r", value_parser = parse_sampler)]
        sampler: Vec<SamplerName>,
        /// JSON file overriding protocol fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerName, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. } | Error::Csv(_) => EXIT_CONFIG,
            Error::Divergence { .. } | Error::NonFiniteLoss { .. } => EXIT_DIVERGENCE,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Runs a parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run { config, common } => cmd_run(&config, &common),
        Command::BenchSynthetic { common } => cmd_bench(&common),
        Command::VisFunnel { common } => cmd_vis_funnel(&common),
        Command::Bnn {
            data,
            target_column,
            sampler,
            config,
            common,
        } => cmd_bnn(data.as_deref(), &target_column, &sampler, config.as_deref(), &common),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn setup(common: &Common, config_out: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    let dir = common
        .out
        .clone()
        .or_else(|| config_out.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes to a sibling temporary file, then renames over the destination.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn new(dir: PathBuf) -> Self {
        Self {
            dir,
            written: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn manifest(mut self, command: &str, hash: &str, seeds: &[u64]) -> CliResult<()> {
        self.written.sort();
        let m = json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config_hash": hash,
            "seeds": seeds,
            "files": self.written,
        });
        let name = format!("{command}.manifest.json");
        write_atomic(&self.dir.join(name), pretty(&m).as_bytes())?;
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

/// Reports the first failure in run order after all runs finished.
fn first_error<T>(results: Vec<std::result::Result<T, Error>>) -> (Vec<T>, Option<CliError>) {
    let mut ok = Vec::new();
    let mut err = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => {
                if err.is_none() {
                    err = Some(CliError::from(e));
                }
            }
        }
    }
    (ok, err)
}

// ---------------------------------------------------------------------------
// run

/// Snapshots in the reporting space, one row per (snapshot, particle).
pub fn trajectory_csv(samples: &ndarray::Array3<f64>, target: &dyn Target) -> String {
    let (_, _, d) = samples.dim();
    let mut out = String::from("schema_version,snapshot,particle");
    for c in 0..d {
        let _ = write!(out, ",x{c}");
    }
    out.push('\n');
    for (s, snap) in samples.outer_iter().enumerate() {
        for (p, row) in snap.outer_iter().enumerate() {
            let _ = write!(out, "{SCHEMA_VERSION},{s},{p}");
            for x in target.to_reporting_space(&row.to_vec()) {
                let _ = write!(out, ",{}", format_float(x));
            }
            out.push('\n');
        }
    }
    out
}

fn cmd_run(path: &Path, common: &Common) -> CliResult<()> {
    let mut cfg = config::load(path)?;
    if let Some(seeds) = &common.seed {
        cfg.seeds = seeds.clone();
        cfg.validate()?;
    }
    let dir = setup(common, cfg.output_dir.as_deref())?;
    let target = targets::build(&cfg.target.spec())?;
    let dim = target.dim();
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..cfg.samplers.len()).map(move |i| (s, i)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(seed, i)| {
            let rc = cfg.run_config(i, seed, dim);
            run(&rc, GradientModel::Full(target.as_ref())).map(|out| (rc.sampler.kind, seed, out))
        })
        .collect();
    let (done, err) = first_error(results);
    let mut artifacts = Artifacts::new(dir);
    for (kind, seed, out) in done {
        let report = if common.timing { out.report } else { out.report.without_timing() };
        let stem = format!("{}_seed{seed}", kind.name());
        artifacts.write(&format!("{stem}.json"), &report.to_json())?;
        artifacts.write(&format!("{stem}.csv"), &trajectory_csv(&out.samples, target.as_ref()))?;
    }
    artifacts.manifest("run", &config_hash(&cfg), &cfg.seeds)?;
    err.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------
// bench-synthetic

pub const BENCH_ITERATIONS: usize = 1000;
pub const BENCH_COLLECTION: CollectionPolicy = CollectionPolicy { burn_in: 500, thin: 10 };
pub const DEFAULT_BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// One synthetic benchmark problem: the target, its particle count and the
/// SGLD+R step size.
#[derive(Debug, Clone)]
pub struct BenchProblem {
    pub name: &'static str,
    pub spec: TargetSpec,
    pub particles: usize,
    pub eps: f64,
}

pub const BENCH_PROBLEMS: [BenchProblem; 2] = [
    BenchProblem {
        name: "moe",
        spec: TargetSpec::Moe,
        particles: 10,
        eps: 0.05,
    },
    BenchProblem {
        name: "mog",
        spec: TargetSpec::MogGrid,
        particles: 20,
        eps: 0.01,
    },
];

pub const BENCH_SAMPLERS: [SamplerKind; 2] = [SamplerKind::Sgld, SamplerKind::SgldR];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub distribution: String,
    pub sampler: String,
    pub seed: u64,
    pub ess: Option<f64>,
    pub ess_per_s: Option<f64>,
    /// Summed absolute first-moment error over dimensions.
    pub err_ex: f64,
    /// Summed absolute second-moment error over dimensions.
    pub err_ex2: f64,
}

/// Run configuration of the synthetic benchmark. Independent SGLD chains take
/// the per-particle step `ε/L`.
pub fn bench_run_config(problem: &BenchProblem, kind: SamplerKind, dim: usize, seed: u64) -> RunConfig {
    let eps = match kind {
        SamplerKind::Sgld => problem.eps / problem.particles as f64,
        _ => problem.eps,
    };
    RunConfig {
        sampler: SamplerConfig::new(kind),
        particles: problem.particles,
        init: InitConfig::isotropic(dim, 0.0, 1.0),
        schedule: StepSchedule::Constant { eps },
        collection: BENCH_COLLECTION,
        iterations: BENCH_ITERATIONS,
        seed,
    }
}

fn summed_error(report: &RunReport, order: u32) -> f64 {
    let suffix = format!("_pow{order}");
    report
        .moment_errors
        .iter()
        .filter(|m| m.label.ends_with(&suffix))
        .map(|m| m.error)
        .sum()
}

/// Every (problem, sampler, seed) row of the synthetic benchmark, in that
/// order.
pub fn bench_synthetic(seeds: &[u64], timing: bool) -> crate::Result<Vec<BenchRow>> {
    let mut jobs = Vec::new();
    for p in &BENCH_PROBLEMS {
        for k in BENCH_SAMPLERS {
            for &s in seeds {
                jobs.push((p, k, s));
            }
        }
    }
    jobs.par_iter()
        .map(|&(p, kind, seed)| {
            let target = targets::build(&p.spec)?;
            let cfg = bench_run_config(p, kind, target.dim(), seed);
            let out = run(&cfg, GradientModel::Full(target.as_ref()))?;
            let report = out.report;
            Ok(BenchRow {
                distribution: p.name.to_string(),
                sampler: kind.name().to_string(),
                seed,
                ess: report.ess,
                ess_per_s: if timing { report.ess_per_second } else { None },
                err_ex: summed_error(&report, 1),
                err_ex2: summed_error(&report, 2),
            })
        })
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let cell = |x: Option<f64>| x.map_or(String::new(), format_float);
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.distribution,
            r.sampler,
            r.seed,
            cell(r.ess),
            cell(r.ess_per_s),
            format_float(r.err_ex),
            format_float(r.err_ex2)
        );
    }
    out
}

fn cmd_bench(common: &Common) -> CliResult<()> {
    let dir = setup(common, None)?;
    let seeds = common.seed.clone().unwrap_or_else(|| DEFAULT_BENCH_SEEDS.to_vec());
    let rows = bench_synthetic(&seeds, common.timing)?;
    let mut artifacts = Artifacts::new(dir);
    artifacts.write("bench_synthetic.csv", &bench_csv(&rows))?;
    let protocol = json!({
        "iterations": BENCH_ITERATIONS,
        "burn_in": BENCH_COLLECTION.burn_in,
        "thin": BENCH_COLLECTION.thin,
        "problems": BENCH_PROBLEMS.iter().map(|p| json!({"name": p.name, "particles": p.particles, "eps": p.eps})).collect::<Vec<_>>(),
    });
    artifacts.manifest("bench-synthetic", &config_hash(&protocol), &seeds)
}

// ---------------------------------------------------------------------------
// vis-funnel

pub const VIS_REFINEMENTS: [usize; 3] = [0, 1, 2];
pub const VIS_OUTER_ITERATIONS: usize = 50;
pub const VIS_SAMPLES: usize = 16;
pub const VIS_INITIAL_ETA: f64 = 0.1;
pub const DEFAULT_VIS_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

/// VIS-P with an SGLD inner sampler and full AD, started from `N(0, I)`.
pub fn vis_funnel_run(t_refine: usize, seed: u64) -> crate::Result<OptimizeOutput> {
    let funnel = targets::funnel();
    let rg = RefinedGuide::new(
        DiagonalGaussianGuide::standard(2)?,
        InnerSampler::Sgld,
        VIS_INITIAL_ETA,
        t_refine,
        EntropyMode::P,
        AdMode::Full,
    )?;
    let mut rng = stream(seed, 0);
    optimize(
        &rg,
        &funnel,
        VIS_OUTER_ITERATIONS,
        VIS_SAMPLES,
        &OuterOptimizer::default(),
        &mut rng,
    )
}

#[derive(Debug, Serialize)]
struct LearnedGuide {
    t_refine: usize,
    seed: u64,
    mean: Vec<f64>,
    scale: Vec<f64>,
    eta: f64,
    final_loss: f64,
}

fn cmd_vis_funnel(common: &Common) -> CliResult<()> {
    let dir = setup(common, None)?;
    let seeds = common.seed.clone().unwrap_or_else(|| DEFAULT_VIS_SEEDS.to_vec());
    let jobs: Vec<(usize, u64)> = VIS_REFINEMENTS
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(t, s)| vis_funnel_run(t, s).map(|o| (t, s, o)))
        .collect();
    let (done, err) = first_error(results);
    let mut trace = String::from("schema_version,t_refine,seed,iteration,neg_elbo\n");
    let mut learned = Vec::new();
    for (t, seed, out) in &done {
        for (i, loss) in out.loss_trace.iter().enumerate() {
            let _ = writeln!(trace, "{SCHEMA_VERSION},{t},{seed},{i},{}", format_float(*loss));
        }
        let g = &out.guide;
        learned.push(LearnedGuide {
            t_refine: *t,
            seed: *seed,
            mean: g.guide.mean.to_vec(),
            scale: g.guide.scale().to_vec(),
            eta: g.eta(),
            final_loss: *out.loss_trace.last().expect("at least one outer iteration"),
        });
    }
    let mut artifacts = Artifacts::new(dir);
    artifacts.write("vis_funnel_trace.csv", &trace)?;
    let params = json!({"schema_version": SCHEMA_VERSION, "runs": learned});
    artifacts.write("vis_funnel_params.json", &pretty(&params))?;
    let protocol = json!({
        "refinements": VIS_REFINEMENTS,
        "outer_iterations": VIS_OUTER_ITERATIONS,
        "samples": VIS_SAMPLES,
        "initial_eta": VIS_INITIAL_ETA,
        "optimizer": OuterOptimizer::default(),
    });
    artifacts.manifest("vis-funnel", &config_hash(&protocol), &seeds)?;
    err.map_or(Ok(()), Err)
}

// ---------------------------------------------------------------------------
// bnn

pub const SYNTHETIC_ROWS: usize = 500;
pub const SYNTHETIC_INPUTS: usize = 5;
pub const SYNTHETIC_NOISE_STD: f64 = 0.5;

/// Loads the CSV, or generates the synthetic linear dataset, split with `seed`.
pub fn bnn_dataset(
    path: Option<&Path>,
    target_column: &str,
    protocol: &BnnProtocol,
    seed: u64,
) -> crate::Result<(String, RegressionDataset)> {
    match path {
        Some(p) => {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
            Ok((name, load_csv(p, target_column, protocol.train_fraction, seed)?))
        }
        None => {
            let (names, raw) = synthetic_linear(SYNTHETIC_ROWS, SYNTHETIC_INPUTS, SYNTHETIC_NOISE_STD, seed);
            let data = RegressionDataset::from_columns(names, raw, "y", protocol.train_fraction, seed)?;
            Ok(("synthetic_linear".to_string(), data))
        }
    }
}

fn load_protocol(path: Option<&Path>) -> crate::Result<BnnProtocol> {
    let Some(path) = path else {
        return Ok(BnnProtocol::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Config(format!(
            "field `{field}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        ))
    })
}

fn cmd_bnn(
    data: Option<&Path>,
    target_column: &str,
    samplers: &[SamplerName],
    config: Option<&Path>,
    common: &Common,
) -> CliResult<()> {
    let protocol = load_protocol(config)?;
    let dir = setup(common, None)?;
    let seeds = common.seed.clone().unwrap_or_else(|| vec![0]);
    let datasets = seeds
        .iter()
        .map(|&s| bnn_dataset(data, target_column, &protocol, s).map(|d| (s, d)))
        .collect::<crate::Result<Vec<_>>>()?;
    let dataset_name = datasets[0].1 .0.clone();
    let jobs: Vec<(usize, SamplerKind)> = (0..datasets.len())
        .flat_map(|i| samplers.iter().map(move |s| (i, s.kind())))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(i, kind)| {
            let (seed, (name, d)) = &datasets[i];
            run_bnn(d, name, kind, &protocol, *seed)
        })
        .collect();
    let (done, err) = first_error(results);
    let mut artifacts = Artifacts::new(dir);
    let mut hashes = Vec::new();
    for mut report in done {
        report.config_hash = bnn_config_hash(&report, target_column);
        hashes.push(report.config_hash.clone());
        let name = format!("bnn_{}_{}_seed{}.json", report.dataset, report.sampler, report.seed);
        artifacts.write(&name, &pretty(&report))?;
    }
    let hash = config_hash(&json!({
        "dataset": dataset_name,
        "target_column": target_column,
        "samplers": samplers,
        "protocol": protocol,
    }));
    artifacts.manifest("bnn", &hash, &seeds)?;
    err.map_or(Ok(()), Err)
}

/// Hash of everything that determines a report except its seed.
fn bnn_config_hash(report: &BnnReport, target_column: &str) -> String {
    config_hash(&json!({
        "dataset": report.dataset,
        "target_column": target_column,
        "sampler": report.sampler,
        "protocol": report.protocol,
    }))
}

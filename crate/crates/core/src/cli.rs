//! Command-line entry points. [`main_with_args`] returns the process exit
//! code: 0 on success, 1 on validation errors, 2 on runtime errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::cluster::derive_seed;
use crate::config::{headline, load_config, set_path, write_artifacts, write_atomic, ConfigError, SimConfig};
use crate::cost::{eval_model, fit_model, CostError, Dataset, Forest, Hyperparams, Schema};
use crate::metrics::{error_cdf_report, pareto_frontier, DEFAULT_CDF_THRESHOLDS, SUMMARY_HEADER};

pub const LOG_ENV: &str = "FRONTIER_SIM_LOG";
pub const SWEEP_RESULTS_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "stagesim", version, about = "Discrete-event simulator for LLM inference serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpKind {
    Attention,
    GroupedGemm,
    SqrtProxy,
}

impl OpKind {
    pub fn schema(self) -> Schema {
        match self {
            OpKind::Attention => Schema::AttentionV1,
            OpKind::GroupedGemm => Schema::GroupedGemmV1,
            OpKind::SqrtProxy => Schema::SqrtProxyV1,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one configuration and write trace and metrics.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate every point of a parameter grid.
    Sweep {
        config: PathBuf,
        /// JSON object mapping dotted config paths to value lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a regression-forest cost model on a profiling CSV.
    Fit {
        csv: PathBuf,
        #[arg(long, value_enum)]
        op: OpKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        trees: usize,
        #[arg(long, default_value_t = 12)]
        max_depth: usize,
        #[arg(long, default_value_t = 2)]
        min_leaf: usize,
        #[arg(long)]
        max_features: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of rows held out for the reported error CDF.
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
    },
    /// Score a saved model against a profiling CSV.
    EvalCostModel { model: PathBuf, csv: PathBuf },
    /// Parse and validate a config without running it.
    ValidateConfig { config: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<CostError> for Failure {
    fn from(e: CostError) -> Self {
        match e {
            CostError::Io(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command, cli.quiet) {
        Ok(()) => 0,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(cmd: Command, quiet: bool) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out.as_deref(), quiet),
        Command::Sweep { config, grid, jobs, seed, out } => {
            cmd_sweep(&config, &grid, jobs, seed, out.as_deref(), quiet)
        }
        Command::Fit { csv, op, out, trees, max_depth, min_leaf, max_features, seed, holdout } => {
            let hp = Hyperparams {
                n_trees: trees,
                max_depth,
                min_samples_leaf: min_leaf,
                max_features,
                seed,
                ..Hyperparams::default()
            };
            cmd_fit(&csv, op, &out, &hp, holdout, quiet)
        }
        Command::EvalCostModel { model, csv } => cmd_eval(&model, &csv),
        Command::ValidateConfig { config } => {
            let cfg = load_config(&config)?;
            println!(
                "{}: ok ({:?}, {} clusters, hash {})",
                config.display(),
                cfg.deployment.mode,
                cfg.deployment.clusters.len(),
                cfg.hash()
            );
            Ok(())
        }
    }
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<SimConfig, Failure> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<&Path>, quiet: bool) -> Result<(), Failure> {
    let cfg = load_with_seed(path, seed)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    log::info!("running {} with seed {}", path.display(), cfg.seed);
    let result = cfg.execute(0).map_err(runtime)?;
    write_artifacts(&dir, &cfg.hash(), &result).map_err(runtime)?;
    if !quiet {
        println!("{}", headline(&result.metrics));
        println!("artifacts in {}", dir.display());
    }
    Ok(())
}

/// Grid points in key order; the last key varies fastest.
pub fn expand_grid(grid: &BTreeMap<String, Vec<serde_json::Value>>) -> Vec<Vec<(String, serde_json::Value)>> {
    let mut points = vec![vec![]];
    for (key, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

struct PointResult {
    row: Vec<String>,
    score: Option<(f64, f64)>,
}

fn cmd_sweep(
    path: &Path,
    grid_path: &Path,
    jobs: usize,
    seed: Option<u64>,
    out: Option<&Path>,
    quiet: bool,
) -> Result<(), Failure> {
    let base = load_with_seed(path, seed)?;
    let grid_text =
        std::fs::read_to_string(grid_path).map_err(|e| Failure::Validation(format!("{}: {e}", grid_path.display())))?;
    let grid: BTreeMap<String, Vec<serde_json::Value>> =
        serde_json::from_str(&grid_text).map_err(|e| Failure::Validation(format!("{}: {e}", grid_path.display())))?;
    let base_doc = serde_json::to_value(&base).expect("config serializes");
    let points = expand_grid(&grid);
    for p in &points {
        let mut probe = base_doc.clone();
        for (k, v) in p {
            set_path(&mut probe, k, v.clone())?;
        }
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| base.output.dir.clone());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(runtime)?;
    let results: Vec<PointResult> =
        pool.install(|| points.par_iter().enumerate().map(|(i, p)| run_point(&base, &base_doc, i as u64, p)).collect());
    let scores: Vec<(usize, (f64, f64))> =
        results.iter().enumerate().filter_map(|(i, r)| r.score.map(|s| (i, s))).collect();
    let frontier: Vec<usize> =
        pareto_frontier(&scores.iter().map(|&(_, s)| s).collect::<Vec<_>>()).into_iter().map(|j| scores[j].0).collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["point", "status", "seed", "params"];
    header.extend(SUMMARY_HEADER);
    header.extend(["on_frontier", "error"]);
    w.write_record(&header).map_err(runtime)?;
    for (i, r) in results.iter().enumerate() {
        let mut row = r.row.clone();
        row.insert(row.len() - 1, frontier.contains(&i).to_string());
        w.write_record(&row).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(runtime)?;
    write_atomic(&dir.join(SWEEP_RESULTS_FILE), &bytes).map_err(runtime)?;
    let ok = scores.len();
    if !quiet {
        println!("{ok}/{} points succeeded; frontier: {frontier:?}", points.len());
        println!("results in {}", dir.join(SWEEP_RESULTS_FILE).display());
    }
    if ok == 0 {
        return Err(Failure::Runtime("every sweep point failed".into()));
    }
    Ok(())
}

fn run_point(
    base: &SimConfig,
    base_doc: &serde_json::Value,
    index: u64,
    point: &[(String, serde_json::Value)],
) -> PointResult {
    let params = serde_json::to_string(&point.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<BTreeMap<_, _>>())
        .expect("params serialize");
    let run_seed = derive_seed(&[base.seed, index]);
    let failed = |msg: String| {
        let mut row = vec![index.to_string(), "failed".into(), run_seed.to_string(), params.clone()];
        row.extend(std::iter::repeat_n(String::new(), SUMMARY_HEADER.len()));
        row.push(msg);
        PointResult { row, score: None }
    };
    let mut doc = base_doc.clone();
    for (k, v) in point {
        set_path(&mut doc, k, v.clone()).expect("paths checked before the sweep");
    }
    let mut cfg: SimConfig = match serde_json::from_value(doc) {
        Ok(c) => c,
        Err(e) => return failed(e.to_string()),
    };
    cfg.base_dir = base.base_dir.clone();
    if let Err(e) = cfg.validate() {
        return failed(e.to_string());
    }
    match cfg.execute(index) {
        Ok(res) => {
            let m = &res.metrics;
            let mut row = vec![index.to_string(), "ok".into(), run_seed.to_string(), params];
            row.extend(m.summary_record(&cfg.hash()));
            row.push(String::new());
            PointResult { row, score: Some((m.throughput_tokens_per_s_per_gpu, m.tpot_s.p90)) }
        }
        Err(e) => failed(e.to_string()),
    }
}

fn print_cdf(label: &str, cdf: &crate::cost::ErrorCdf) -> Result<(), Failure> {
    for (t, frac) in error_cdf_report(cdf, &DEFAULT_CDF_THRESHOLDS).map_err(runtime)? {
        println!("{label} cdf({t:.2}) = {frac:.4}");
    }
    Ok(())
}

fn cmd_fit(csv: &Path, op: OpKind, out: &Path, hp: &Hyperparams, holdout: f64, quiet: bool) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Failure::Validation(format!("holdout must be in [0, 1), got {holdout}")));
    }
    let data = Dataset::load(csv, Some(op.schema()))?;
    let (train, test) = data.split_holdout(holdout, hp.seed);
    let (forest, report) = fit_model(&train, hp)?;
    write_atomic(out, forest.to_file_string().as_bytes()).map_err(runtime)?;
    if !quiet {
        println!("fit {} trees on {} rows ({} held out), wrote {}", hp.n_trees, train.len(), test.len(), out.display());
    }
    if let Some(oob) = &report.out_of_bag {
        print_cdf("out-of-bag", oob)?;
    }
    if !test.is_empty() {
        print_cdf("held-out", &eval_model(&forest, &test)?)?;
    }
    Ok(())
}

fn cmd_eval(model: &Path, csv: &Path) -> Result<(), Failure> {
    let forest = Forest::load(model)?;
    let data = Dataset::load(csv, Some(forest.schema))?;
    print_cdf("eval", &eval_model(&forest, &data)?)
}

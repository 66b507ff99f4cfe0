//! `maskcal`: synthetic data, mask models, calibration and evaluation.
//!
//! Exit status is 0 on success, 1 when a pipeline step fails on its inputs
//! and 2 for usage errors.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use maskcal_core::calibration::Heuristic;
use maskcal_core::{DistortionSpec, Split};

#[derive(Debug, Parser)]
#[command(name = "maskcal", version, about = "Calibrated uncertainty masks for image restoration")]
pub struct Cli {
    /// JSON file with default flag values; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for training and synthetic generation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset from a JSON spec.
    SynthGen(SynthGenArgs),
    /// Train the masking model on the train split.
    TrainMasker(TrainMaskerArgs),
    /// Train lower/upper quantile regressors on the train split.
    TrainQuantile(TrainQuantileArgs),
    /// Predict heuristic masks with a trained masker.
    PredictMask(PredictArgs),
    /// Predict heuristic masks from quantile interval widths.
    PredictQuantileMask(PredictArgs),
    /// Calibrate the uniform scalar baseline.
    Uni(UniArgs),
    /// Compute per-record oracle masks with access to the ground truth.
    Oracle(OracleArgs),
    /// Optimal masks for known per-pixel errors.
    ClosedForm(ClosedFormArgs),
    /// Calibrate a heuristic on the calibration split.
    Calibrate(CalibrateArgs),
    /// Write calibrated masks for a split.
    Apply(ApplyArgs),
    /// Mask size, correlation and coverage reports.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Linear,
    Mlp,
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOpts {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "l2")]
    pub distortion: DistortionSpec,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, default_value_t = 25)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = ModelArg::Linear)]
    pub model: ModelArg,
    /// Hidden units for `--model mlp`.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Feed raw features instead of train-set standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
    /// Per-epoch loss as CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainMaskerArgs {
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long, default_value_t = 2.0)]
    pub mu: f64,
}

#[derive(Debug, Args)]
pub struct TrainQuantileArgs {
    #[command(flatten)]
    pub train: TrainOpts,
    #[arg(long, default_value_t = 0.05)]
    pub lower: f64,
    #[arg(long, default_value_t = 0.95)]
    pub upper: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Masks go to `<out-dir>/<id>.mskt`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Manifest with the masks attached; defaults to `<out-dir>/manifest.jsonl`.
    #[arg(long)]
    pub out_manifest: Option<PathBuf>,
    /// Restrict to one split (default: every record).
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct AlphaOpts {
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Set alpha to this quantile of unmasked train-split distortions.
    #[arg(long, conflicts_with = "alpha")]
    pub alpha_quantile: Option<f64>,
}

#[derive(Debug, Args)]
pub struct UniArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "l2")]
    pub distortion: DistortionSpec,
    #[command(flatten)]
    pub alpha: AlphaOpts,
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "l2")]
    pub distortion: DistortionSpec,
    #[command(flatten)]
    pub alpha: AlphaOpts,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Per-record summary; defaults to `<out-dir>/oracle.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.002)]
    pub mu_growth: f64,
    #[arg(long, default_value_t = 0.01)]
    pub step_size: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct ClosedFormArgs {
    /// Tensor of per-pixel errors `d_i`.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub errors: Option<PathBuf>,
    /// Use `|y - y_hat|^p` of every record instead.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub p: f64,
    #[arg(long)]
    pub alpha: f64,
    /// Output tensor (with `--errors`) or directory (with `--manifest`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub heuristic: Heuristic,
    #[arg(long, default_value = "l2")]
    pub distortion: DistortionSpec,
    #[command(flatten)]
    pub alpha: AlphaOpts,
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = maskcal_core::calibration::DEFAULT_BISECTION_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = maskcal_core::calibration::DEFAULT_EPSILON_DENOMINATOR)]
    pub epsilon_denominator: f64,
    #[arg(long, default_value_t = maskcal_core::calibration::DEFAULT_GRID_POINTS)]
    pub grid_points: usize,
    /// Refuse distortions that are not monotone in the mask.
    #[arg(long)]
    pub no_scan_fallback: bool,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub out_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// `name=dir` with one calibrated mask per record; repeatable.
    #[arg(long = "method", required = true)]
    pub methods: Vec<String>,
    /// Directory of oracle masks.
    #[arg(long)]
    pub opt: Option<PathBuf>,
    #[arg(long, default_value = "l2")]
    pub distortion: DistortionSpec,
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write histogram and scatter plots.
    #[arg(long)]
    pub svg: bool,
}

/// Errors caused by how the tool was invoked rather than by the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let root = Cli::command();
    // a first lenient pass only locates --config and the explicit flags;
    // required values may still come from the config
    let probe = root.clone().ignore_errors(true).try_get_matches_from(&argv);
    let path = probe
        .as_ref()
        .ok()
        .and_then(|m| m.try_get_one::<PathBuf>("config").ok().flatten().cloned());
    let (Some(path), Ok(matches)) = (path, probe) else {
        let matches = root.try_get_matches_from(&argv)?;
        return Cli::from_arg_matches(&matches);
    };
    let extra = config::config_args(&path, &root, &matches)
        .map_err(|msg| root.clone().error(clap::error::ErrorKind::InvalidValue, msg))?;
    let mut full = argv;
    full.extend(extra);
    let matches = root.try_get_matches_from(&full)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match commands::run(&cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

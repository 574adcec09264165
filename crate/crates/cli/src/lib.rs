//! Command-line front end for Deep Lambertian Networks.
//!
//! Subcommands: `synth`, `train`, `infer`, `relight`, `recognize`.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dln_core::DlnError;
use thiserror::Error;

mod commands;
mod settings;

pub use settings::{Settings, EFFECTIVE_CONFIG_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DlnError> for CliError {
    fn from(e: DlnError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dln", version, about = "Deep Lambertian Networks: synthesis, training, inference, relighting and recognition")]
pub struct Cli {
    /// Master seed; every random draw derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the hardware count); results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress (-v) or details (-vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic Lambertian subjects with ground truth.
    Synth(SynthArgs),
    /// Train a model with approximate EM.
    Train(TrainArgs),
    /// Infer albedo, normals and lights from one or more images.
    Infer(InferArgs),
    /// Render inferred latents under lights drawn from the model's light prior.
    Relight(RelightArgs),
    /// One-shot recognition against the baselines.
    Recognize(RecognizeArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct HmcArgs {
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub leapfrog_steps: Option<usize>,
    /// HMC transitions per pixel per sweep.
    #[arg(long)]
    pub hmc_epochs: Option<usize>,
    #[arg(long)]
    pub mass: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// sphere, random_smooth or flat.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub lights: Option<usize>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// uniform, constant or checker.
    #[arg(long)]
    pub albedo: Option<String>,
    #[arg(long)]
    pub albedo_low: Option<f64>,
    #[arg(long)]
    pub albedo_high: Option<f64>,
    /// Largest light angle from the viewing axis, in degrees.
    #[arg(long)]
    pub max_light_angle: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (one subdirectory of images per subject).
    #[arg(long)]
    pub data: PathBuf,
    /// Output model container.
    #[arg(long)]
    pub out: PathBuf,
    /// Images used to pretrain the albedo prior before EM.
    #[arg(long)]
    pub pretrain_corpus: Option<PathBuf>,
    #[arg(long)]
    pub em_iters: Option<usize>,
    #[arg(long)]
    pub e_step_sweeps: Option<usize>,
    #[arg(long)]
    pub cd_epochs: Option<usize>,
    #[arg(long)]
    pub cd_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub albedo_rate: Option<f64>,
    #[arg(long)]
    pub normal_rate: Option<f64>,
    /// Comma-separated hidden layer sizes of the albedo prior.
    #[arg(long)]
    pub albedo_hidden: Option<String>,
    #[arg(long)]
    pub normal_hidden: Option<String>,
    /// Translation augmentation of normal fields, in pixels.
    #[arg(long)]
    pub translate: Option<usize>,
    /// Soft unit-norm penalty on the normals.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Resize training images to this square size.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Save a checkpoint every K EM iterations (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub hmc: HmcArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Images of one object; all are inferred jointly.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// bias or svd.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub average_last: Option<usize>,
    /// Write albedo and normal images every K sweeps (0 disables).
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[command(flatten)]
    pub hmc: HmcArgs,
}

#[derive(Debug, Args)]
pub struct RelightArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Latents container written by `infer`.
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Apply max(., 0) to rendered intensities.
    #[arg(long)]
    pub clamp: Option<bool>,
}

#[derive(Debug, Args)]
pub struct RecognizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training images, one subdirectory per subject.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Probe images, one subdirectory per subject; `subsets.csv` groups them.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of dln,nn,correlation,svd, or all.
    #[arg(long)]
    pub methods: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub init: Option<String>,
    #[command(flatten)]
    pub hmc: HmcArgs,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Run a parsed command line.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Usage(format!("cannot build thread pool: {e}")))?
    };
    let file = match &cli.config {
        Some(path) => Some(dln_core::io::read_key_values(path).map_err(|e| CliError::Usage(e.to_string()))?),
        None => None,
    };
    let seed = cli.seed.map(|s| s.to_string());
    pool.install(|| match &cli.command {
        Command::Synth(a) => commands::synth(a, file.as_ref(), seed),
        Command::Train(a) => commands::train(a, file.as_ref(), seed),
        Command::Infer(a) => commands::infer(a, file.as_ref(), seed),
        Command::Relight(a) => commands::relight(a, file.as_ref(), seed),
        Command::Recognize(a) => commands::recognize(a, file.as_ref(), seed),
    })
}

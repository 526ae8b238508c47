//! `wingbeat`: synthetic data, features, training, evaluation, sweeps,
//! Grad-CAM, quantization, inference and latency benchmarks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wingbeat::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "wingbeat", version, about = "Acoustic mosquito wingbeat classification")]
pub struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

/// Feature pipeline overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub sample_rate: Option<u32>,
    /// STFT window W (a power of two).
    #[arg(long)]
    pub fft_size: Option<usize>,
    /// STFT hop H.
    #[arg(long)]
    pub hop: Option<usize>,
    /// Spectrogram frames F per feature.
    #[arg(long)]
    pub frames: Option<usize>,
}

/// Topology and training overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    /// Square kernel size K.
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Residual blocks B.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Filters per block P.
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub dense_width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Let features of one recording fall into different folds.
    #[arg(long)]
    pub no_group_folds: bool,
}

/// Where labeled features come from.
#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct DataArgs {
    /// Manifest CSV (`path,label,group`).
    #[arg(long, value_name = "CSV")]
    pub manifest: Option<PathBuf>,
    /// Feature cache written by `features`; its pipeline settings become
    /// the defaults, and explicit pipeline flags must agree with them.
    #[arg(long, value_name = "WBFT")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labeled synthetic dataset (WAVs and manifest.csv).
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Positive clips.
        #[arg(long)]
        pos: Option<usize>,
        /// Negative clips.
        #[arg(long)]
        neg: Option<usize>,
        /// Mixing SNR of positives against noise.
        #[arg(long, conflicts_with = "clean")]
        snr_db: Option<f64>,
        /// Positives without added noise.
        #[arg(long)]
        clean: bool,
    },
    /// Extract spectrogram features from a manifest into a cache file.
    Features {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        #[arg(long, value_name = "WBFT")]
        out: PathBuf,
        /// Also write one PGM image per feature into this directory.
        #[arg(long, value_name = "DIR")]
        images: Option<PathBuf>,
        /// With --images, also write mel-scaled images with this many bands.
        #[arg(long, value_name = "BANDS", requires = "images")]
        legacy_mel: Option<usize>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// k-fold cross-validation; writes model.wbnn, folds.jsonl, summary.json.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Metrics and confusion matrix of a model on labeled data.
    Evaluate {
        /// Float (WBNN) or quantized (WBNQ) model.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Directory for metrics.json and confusion.csv.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Greedy one-axis-at-a-time parameter sweep.
    Sweep {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Axis order, e.g. `kernel,blocks,frames,window,filters,hop`.
        #[arg(long, value_delimiter = ',')]
        axes: Option<Vec<String>>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Grad-CAM heatmap of one segment of a recording, as a PPM overlay.
    Gradcam {
        #[arg(long, value_name = "WBNN")]
        model: PathBuf,
        #[arg(long, value_name = "WAV")]
        input: PathBuf,
        /// Class to explain: pos or neg.
        #[arg(long, default_value = "pos")]
        class: String,
        /// Segment of the recording to explain.
        #[arg(long, default_value_t = 0)]
        segment: usize,
        #[arg(long, value_name = "PPM")]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Fold batch norms and store int8 weights (WBNQ).
    Quantize {
        #[arg(long, value_name = "WBNN")]
        model: PathBuf,
        #[arg(long, value_name = "WBNQ")]
        out: PathBuf,
        /// Report float/quantized argmax agreement on this feature cache.
        #[arg(long, value_name = "WBFT")]
        features: Option<PathBuf>,
    },
    /// Per-segment positive probabilities of a recording.
    Infer {
        /// Float (WBNN) or quantized (WBNQ) model.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "WAV")]
        input: PathBuf,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Single-feature latency of the float and quantized variants.
    Bench {
        #[arg(long, value_name = "WBNN")]
        model: PathBuf,
        /// Timed inferences per variant.
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Also write the report here.
        #[arg(long, value_name = "JSON")]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg)
}

/// Size the global thread pool from `WINGBEAT_THREADS`.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("WINGBEAT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("WINGBEAT_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(&cli)?;
    commands::dispatch(cli.command, cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

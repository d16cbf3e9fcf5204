//! `gtloc` command-line tool: synthetic data, training, galleries,
//! evaluation, prediction and composed retrieval.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Preset;
use crate::error::{CliError, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "gtloc", version, about = "Joint time and geo-location retrieval over image embeddings")]
pub struct Cli {
    /// Worker threads for parallel sections; 1 gives fully sequential runs.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known labels.
    Synth(SynthArgs),
    /// Assign train/eval splits to a dataset.
    Split(SplitArgs),
    /// Train or resume a model.
    Train(TrainArgs),
    /// Embed GPS, time or image labels into a retrieval gallery.
    MakeGallery(GalleryArgs),
    /// Evaluate time and location predictions on a dataset split.
    Eval(EvalArgs),
    /// Predict time and location for external backbone embeddings.
    Predict(PredictArgs),
    /// Retrieve images matching a time and place.
    Compose(ComposeArgs),
    /// Print a configuration file for a preset.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Backbone embedding width.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of capture sites.
    #[arg(long, default_value_t = 64)]
    pub sources: usize,
    /// Scatter of samples around their site, in km.
    #[arg(long, default_value_t = 25.0)]
    pub site_spread_km: f64,
    /// Capture-time distribution: uniform or wrap-heavy.
    #[arg(long, default_value = "uniform")]
    pub time_distribution: String,
    /// Std of Gaussian noise added to backbone vectors.
    #[arg(long, default_value_t = 0.0)]
    pub backbone_noise: f64,
    /// Also assign a random 75/25 train/eval split.
    #[arg(long)]
    pub with_split: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// random or cross_source.
    #[arg(long, default_value = "random")]
    pub mode: String,
    /// Fraction of samples for training.
    #[arg(long, default_value_t = 0.75)]
    pub train_frac: f64,
    /// Fraction of samples for evaluation.
    #[arg(long, default_value_t = 0.25)]
    pub eval_frac: f64,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory; defaults to rewriting the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used for keys the configuration does not set.
    #[arg(long, value_parser = clap::value_parser!(Preset))]
    pub preset: Option<Preset>,
    /// Dataset directory or manifest; trains on its train split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path (JSON lines); defaults to <out>.log.jsonl.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Objectives: gtloc, timeloc or geoloc.
    #[arg(long)]
    pub mode: Option<String>,
    /// Train on this fraction of the training split.
    #[arg(long)]
    pub subsample: Option<f64>,
    /// Gaussian label noise on training times, in months and hours.
    #[arg(long)]
    pub label_noise: Option<f64>,
    /// Passes over the training split.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Samples per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long)]
    pub lr_max: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Seed for shuffling, label noise and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Soft-target distance: cyclic or l2.
    #[arg(long)]
    pub tml_distance: Option<String>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub stop_at_step: Option<u64>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GalleryArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset whose train split supplies the labels (image galleries use every row).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// gps, time or image.
    #[arg(long)]
    pub kind: String,
    /// Number of gallery entries (gps and time).
    #[arg(long, default_value_t = 4096)]
    pub size: usize,
    /// Seed for sampling gallery labels.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Draw time labels uniformly over the torus instead of from the data.
    #[arg(long)]
    pub uniform_time: bool,
    /// Output prefix; writes <out>.bin, <out>.csv and <out>.toml.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Time gallery prefix.
    #[arg(long)]
    pub time_gallery: Option<PathBuf>,
    /// GPS gallery prefix.
    #[arg(long)]
    pub gps_gallery: Option<PathBuf>,
    /// Geodesic accuracy thresholds in km.
    #[arg(long, value_delimiter = ',', default_values_t = gtloc::retrieval::DEFAULT_THRESHOLDS_KM.to_vec())]
    pub thresholds: Vec<f64>,
    /// Split to evaluate: eval, train or all.
    #[arg(long, default_value = "eval")]
    pub split: String,
    /// Metrics CSV path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Backbone embeddings in the binary embedding format.
    #[arg(long)]
    pub embedding_file: PathBuf,
    /// Gallery prefixes (gps, time or image).
    #[arg(long, num_args = 1.., required = true)]
    pub galleries: Vec<PathBuf>,
    /// Matches reported per query and gallery.
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    /// Write month and hour histograms from the time galleries to this CSV.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Gallery entries aggregated into each histogram.
    #[arg(long, default_value_t = gtloc::retrieval::DEFAULT_HISTOGRAM_TOPK)]
    pub histogram_topk: usize,
    /// Predictions CSV path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Query time as "MM-DD HH:MM".
    #[arg(long)]
    pub time: String,
    /// Query latitude in degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub lat: f64,
    /// Query longitude in degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub lon: f64,
    /// Image gallery prefix.
    #[arg(long)]
    pub image_gallery: PathBuf,
    /// Number of images returned.
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// Results CSV path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Preset to print, or to fill keys the file does not set.
    #[arg(long, default_value = "desk", value_parser = clap::value_parser!(Preset))]
    pub preset: Preset,
    /// Configuration file to validate and print in full.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

impl clap::ValueEnum for Preset {
    fn value_variants<'a>() -> &'a [Self] {
        &[Preset::Desk, Preset::Full]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        }))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("cli", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage("cli", e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::MakeGallery(a) => commands::make_gallery(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Compose(a) => commands::compose(a),
        Command::Config(a) => commands::config(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { ExitKind::Usage.code() } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.code() as u8)
        }
    }
}

//! `poseforge` command-line front end.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit status and message of a failed command.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<poseforge::Error> for Failure {
    fn from(e: poseforge::Error) -> Self {
        Self { code: if e.is_domain() { 1 } else { 2 }, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "poseforge", version, about = "Skeleton alignment, feature alignment and guided diffusion sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic misalignment corpus.
    GenCorpus(GenCorpusArgs),
    /// Fit the closed-form similarity transform between two pose files.
    Fit(FitArgs),
    /// Train the alignment refinement model on a corpus.
    Train(TrainArgs),
    /// Evaluate none / svd / learned alignment on a corpus split.
    Eval(EvalArgs),
    /// Draw samples from a Gaussian mixture with the EDM sampler.
    Sample(SampleArgs),
    /// Render a pose sequence as one SVG per frame.
    Render(RenderArgs),
}

#[derive(clap::Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with `n_items`, `seed`, `frames` and `spec`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per procedurally generated sequence.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Pose-sequence JSON file or directory of them to draw clean motion from.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Starting point for the perturbation ranges before individual flags.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Rotations are drawn from [-deg, deg].
    #[arg(long)]
    pub rotation_deg: Option<f64>,
    #[arg(long)]
    pub scale_min: Option<f64>,
    #[arg(long)]
    pub scale_max: Option<f64>,
    /// Translations are drawn per axis from [-t, t].
    #[arg(long, allow_hyphen_values = true)]
    pub translate: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Default,
    Noiseless,
    Zero,
}

#[derive(clap::Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub driven: PathBuf,
    /// Ground-truth aligned sequence; enables the Dis report.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame of the reference file used as the target pose.
    #[arg(long, default_value_t = 0)]
    pub reference_frame: usize,
    #[arg(long, default_value_t = poseforge::skeleton::DEFAULT_CONF_THRESHOLD)]
    pub conf_threshold: f64,
    /// Fit on every driven frame, weighted by confidence, instead of frame 0.
    #[arg(long)]
    pub all_frames: bool,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with `TrainConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub conf_threshold: Option<f64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Trained weights; the untrained model is used when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = poseforge::skeleton::DEFAULT_CONF_THRESHOLD)]
    pub conf_threshold: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Quadratic,
    Cosine,
}

#[derive(clap::Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Mixture JSON (`{"components": [{"weight", "mean", "std"}]}`); defaults
    /// to equal modes at -2 and +2 with std 0.3.
    #[arg(long)]
    pub gmm: Option<PathBuf>,
    /// JSON file with `SamplerConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_steps: Option<u64>,
    #[arg(long)]
    pub churn: Option<f64>,
    #[arg(long, conflicts_with = "guidance")]
    pub no_guidance: bool,
    #[arg(long, value_enum)]
    pub guidance: Option<LossKind>,
    /// Guidance target, comma separated for 2-D mixtures.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    pub target: Option<Vec<f64>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Guided outer steps as `start,end` (end exclusive).
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub window: Option<Vec<usize>>,
    /// Skip the per-step trace.
    #[arg(long)]
    pub no_trace: bool,
}

#[derive(clap::Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Canvas width; defaults to the sequence width, or 512 for normalized input.
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
}

fn init_thread_pool() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("POSEFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::usage(format!("POSEFORGE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_thread_pool()?;
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Render(a) => commands::render(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! Batch front end for the composition pipeline: ingest frame and mask
//! directories, run one configuration or the whole ablation ladder, score
//! the results, and leave frames, manifests, and contact sheets behind.

mod config;
mod run;

use std::fmt;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vidcomp::bpi::Disparity;

const EXIT_CODE_HELP: &str = "exit codes:
  0  success
  2  configuration or usage error
  3  file or image I/O error
  4  backend error
  5  input data mismatch (counts, dimensions, degenerate content)

The VIDCOMP_SCRATCH environment variable relocates kept latent spills.";

#[derive(Debug, Parser)]
#[command(
    name = "vidcomp",
    version,
    about = "Training-free video composition over a diffusion backend",
    after_help = EXIT_CODE_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Re-render a composited clip so the foreground matches its new
    /// background.
    Compose(RunArgs),
    /// Run the five-stage ablation ladder and write a comparison table.
    Ablate(RunArgs),
    /// Score an existing frame directory against reference backgrounds.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DisparityArg {
    Shallow,
    Deep,
}

impl From<DisparityArg> for Disparity {
    fn from(value: DisparityArg) -> Self {
        match value {
            DisparityArg::Shallow => Disparity::Shallow,
            DisparityArg::Deep => Disparity::Deep,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExtractorArg {
    Rgb,
    Luma,
}

impl ExtractorArg {
    fn name(self) -> &'static str {
        match self {
            ExtractorArg::Rgb => "rgb",
            ExtractorArg::Luma => "luma",
        }
    }
}

/// Flags shared by `compose` and `ablate`. Every value can also come from
/// the configuration file; flags win.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory of foreground frames (png/jpg, lexicographic order).
    #[arg(long, value_name = "DIR")]
    fg: Option<PathBuf>,
    /// Directory of background frames.
    #[arg(long, value_name = "DIR")]
    bg: Option<PathBuf>,
    /// Directory of foreground masks (luma >= 50% marks foreground).
    #[arg(long, value_name = "DIR")]
    mask: Option<PathBuf>,
    /// Directory of .flo optical flow files for the temporal metric.
    #[arg(long, value_name = "DIR")]
    flows: Option<PathBuf>,
    /// Built-in flow source used instead of a flow directory ("zero").
    #[arg(long, value_name = "NAME")]
    flow_adapter: Option<String>,
    /// Edit prompt describing the fitted foreground.
    #[arg(long)]
    prompt: Option<String>,
    /// Output directory; created on success, untouched on early errors.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Denoising chain length.
    #[arg(long)]
    steps: Option<usize>,
    /// Inversion turning point; defaults to the disparity preset.
    #[arg(long = "t-b", value_name = "STEP")]
    t_b: Option<usize>,
    /// Lower edge of the attention window.
    #[arg(long, value_name = "STEP")]
    tau: Option<usize>,
    /// Turning point preset for how far the foreground is from the target.
    #[arg(long, value_enum)]
    disparity: Option<DisparityArg>,
    /// Classifier-free guidance scale (>= 1).
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Foreground-to-background cross-attention rescale in [0, 1].
    #[arg(long)]
    cross_strength: Option<f64>,
    /// Seed for the backend; recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list of stages to enable: bpi,cross,ifa,bg (or all/none).
    #[arg(long)]
    stages: Option<String>,
    /// Foreground scale factor when placing it onto the background canvas.
    #[arg(long)]
    scale: Option<f64>,
    /// Foreground x translation in background pixels.
    #[arg(long)]
    dx: Option<f64>,
    /// Foreground y translation in background pixels.
    #[arg(long)]
    dy: Option<f64>,
    /// Denoiser backend ("toy"; external adapters link against the library).
    #[arg(long)]
    backend: Option<String>,
    /// Keep per-frame inversion trajectories under the scratch directory.
    #[arg(long)]
    keep_latents: bool,
    /// Skip the contact sheet image.
    #[arg(long)]
    no_contact_sheet: bool,
    /// Feature extractor for the semantic metric (rgb, luma).
    #[arg(long, value_enum)]
    extractor: Option<ExtractorArg>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory of frames to score.
    #[arg(long, value_name = "DIR")]
    frames: Option<PathBuf>,
    /// Directory of reference background frames.
    #[arg(long, value_name = "DIR")]
    bg: Option<PathBuf>,
    /// Directory of .flo optical flow files.
    #[arg(long, value_name = "DIR")]
    flows: Option<PathBuf>,
    /// Built-in flow source used instead of a flow directory ("zero").
    #[arg(long, value_name = "NAME")]
    flow_adapter: Option<String>,
    /// Feature extractor for the semantic metric (rgb, luma).
    #[arg(long, value_enum)]
    extractor: Option<ExtractorArg>,
    /// File the metrics report is written to.
    #[arg(long, value_name = "FILE", default_value = "metrics.json")]
    out: PathBuf,
}

/// CLI failures split into usage problems and library errors so each can
/// map to its documented exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(vidcomp::Error),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(error) => classify(error),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(message) => f.write_str(message),
            CliError::Core(error) => write!(f, "{error}"),
        }
    }
}

impl From<vidcomp::Error> for CliError {
    fn from(error: vidcomp::Error) -> Self {
        CliError::Core(error)
    }
}

fn classify(error: &vidcomp::Error) -> i32 {
    use vidcomp::Error as E;
    match error {
        E::Frame { source, .. } => classify(source),
        E::Io { .. } | E::Image { .. } | E::FlowFormat { .. } | E::Json { .. } => 3,
        E::Backend { .. } => 4,
        E::ConfigInvalid { .. }
        | E::InvalidStepCount { .. }
        | E::InvalidInversionDepth { .. }
        | E::InvalidWindow { .. }
        | E::StepOutOfRange { .. }
        | E::EmptyDirectory { .. } => 2,
        _ => 5,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compose(args) => config::run_settings(args).and_then(run::compose),
        Command::Ablate(args) => config::run_settings(args).and_then(run::ablate),
        Command::Evaluate(args) => config::evaluate_settings(args).and_then(run::evaluate),
    };
    if let Err(error) = result {
        // Best-effort: a broken stderr pipe must not replace the exit code
        // with a panic's.
        let _ = writeln!(std::io::stderr(), "error: {error}");
        std::process::exit(error.exit_code());
    }
}

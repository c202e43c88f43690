mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clrp::eval::{DEFAULT_PATCH, DEFAULT_SEED};
use clrp::relevance::DEFAULT_EPSILON;
use clrp::Method;

/// Pixel-wise explanations for convolutional classifiers.
#[derive(Debug, Parser)]
#[command(name = "clrp", version)]
struct Cli {
    /// Model container directory or its manifest.json.
    #[arg(long, short, env = "CLRP_MODEL", global = true)]
    model: Option<PathBuf>,

    /// Denominator stabilizer for the relevance rules.
    #[arg(long, default_value_t = DEFAULT_EPSILON, global = true)]
    epsilon: f32,

    /// Worker threads for dataset evaluations.
    #[arg(long, default_value_t = 1, global = true)]
    workers: usize,

    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the layer table and parameter count.
    Info,
    /// Write heatmaps for one image.
    Explain(ExplainArgs),
    /// Energy-thresholded pointing game over an annotated dataset.
    Pointing(PointingArgs),
    /// Mean-patch ablation at each map's maximum.
    Ablate(AblateArgs),
    /// Contrastive maps and the ablation matrix for hidden neurons.
    Neurons(NeuronArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResizeArg {
    Nearest,
    Bilinear,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Also write a PNG next to every PGM.
    #[arg(long)]
    pub png: bool,

    /// Use a black-red-yellow-white ramp for PNG output.
    #[arg(long, requires = "png")]
    pub colormap: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("what").args(["target", "targets", "multi_class"]))]
pub struct ExplainArgs {
    /// Input image (PNG or PPM).
    pub image: PathBuf,

    /// One of lrp, clrp1, clrp2, grad, guided.
    #[arg(long, default_value = "lrp", value_parser = parse_method)]
    pub method: Method,

    /// `top1`, a class index, or a class name.
    #[arg(long)]
    pub target: Option<String>,

    /// `topK`: one map per predicted class.
    #[arg(long)]
    pub targets: Option<String>,

    /// Comma-separated classes propagated together (LRP only).
    #[arg(long)]
    pub multi_class: Option<String>,

    #[arg(long, value_enum, default_value_t = ResizeArg::Bilinear)]
    pub resize: ResizeArg,

    /// Output directory.
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,

    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// JSON-lines annotation file; image paths resolve relative to it.
    #[arg(long)]
    pub annotations: PathBuf,

    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,

    /// Output directory.
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PointingArgs {
    #[command(flatten)]
    pub data: DatasetArgs,

    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "lrp,clrp1,clrp2,grad,guided", value_parser = parse_method)]
    pub methods: Vec<Method>,

    /// Energy fractions in (0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub energy: Vec<f64>,

    /// Count a hit when any selected pixel is inside a box.
    #[arg(long)]
    pub overlap: bool,

    /// Add the always-point-at-the-center baseline.
    #[arg(long)]
    pub center_baseline: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DatasetArgs,

    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', default_value = "lrp,clrp1,clrp2,grad,guided", value_parser = parse_method)]
    pub methods: Vec<Method>,

    /// Seed for the random-position baseline.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    /// Odd patch side length.
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("which").args(["neurons", "top"]).required(true))]
pub struct NeuronArgs {
    /// Input image (PNG or PPM).
    pub image: PathBuf,

    /// Annotated dataset whose mean image fills the ablated patches.
    #[arg(long)]
    pub annotations: PathBuf,

    /// Layer name, e.g. fc1.
    #[arg(long)]
    pub layer: String,

    /// Comma-separated neuron indices.
    #[arg(long, value_delimiter = ',')]
    pub neurons: Vec<usize>,

    /// Use the K most active neurons instead.
    #[arg(long)]
    pub top: Option<usize>,

    /// Odd patch side length.
    #[arg(long, default_value_t = DEFAULT_PATCH)]
    pub patch: usize,

    #[arg(long, value_enum, default_value_t = ResizeArg::Bilinear)]
    pub resize: ResizeArg,

    /// Output directory.
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,

    #[command(flatten)]
    pub render: RenderArgs,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: clrp::Error| e.to_string())
}

/// Argument errors found after parsing; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<clrp::Error>() {
            use clrp::Error as E;
            return match e {
                _ if e.is_numerical_refusal() => 3,
                E::Io(_)
                | E::Json(_)
                | E::Csv(_)
                | E::Image { .. }
                | E::Annotation { .. }
                | E::Manifest(_)
                | E::MissingBlob { .. }
                | E::BlobShape { .. }
                | E::ShapeChain { .. }
                | E::UnsupportedLayer { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

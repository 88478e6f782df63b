mod commands;
mod manifest;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bseg", version, about = "Boundary-aware 3D kidney and tumor segmentation")]
pub struct Cli {
    /// Worker threads for the compute pool.
    #[arg(long, global = true, env = "SEG_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic phantom volumes as MVOL image/label pairs.
    GenData(GenDataArgs),
    /// Train a network on a directory of MVOL pairs.
    Train(TrainArgs),
    /// Segment a volume with one checkpoint or an ensemble.
    Infer(InferArgs),
    /// Score a predicted label volume against ground truth.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Render a slice with label contours as a PNG.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Phantom description (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Base seed; case i uses seed + i. Overrides the file value.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training schedule (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Network shape (TOML); the desk configuration when omitted.
    #[arg(long)]
    pub network: Option<PathBuf>,
    /// Directory holding `*.img.mvol` / `*.lbl.mvol` pairs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub steps_per_epoch: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long, required_unless_present = "ensemble", conflicts_with = "ensemble")]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoints whose predictions are averaged.
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,
    /// Input intensity volume (MVOL).
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Average over all eight axis flips.
    #[arg(long)]
    pub tta: bool,
    #[arg(long, default_value_t = bseg::inference::DEFAULT_OVERLAP)]
    pub overlap: f64,
    #[arg(long, default_value_t = bseg::inference::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Also write `metrics.csv` and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Case name in the CSV row; the prediction file stem by default.
    #[arg(long)]
    pub case: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "64")]
    pub precision: Precision,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Coordinates probed per input tensor.
    #[arg(long, default_value_t = 24)]
    pub max_coords: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "z")]
    pub axis: Axis,
    /// Slice index; the middle slice when omitted.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {failure}");
            failure.exit_code()
        }
    }
}

//! `contour-forge`: dataset generation, training, inference, evaluation and
//! gradient checks.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contour_forge::autodiff::AutodiffError;
use contour_forge::Error;

/// Env var capping worker threads.
pub const THREADS_ENV: &str = "CONTOUR_FORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "contour-forge", version, about = "Contour detection of curved text-like shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Run a checkpoint on one scene file.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene parameter JSON; defaults apply to missing keys.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run config JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Refinement stages (0 disables contour refinement).
    #[arg(long)]
    pub stages: Option<usize>,
    /// Train refinement on ground-truth contours only.
    #[arg(long)]
    pub no_adaptive: bool,
    /// Disable the re-score branch.
    #[arg(long)]
    pub no_rescore: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Also write an SVG overlay here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Refinement stages; defaults to the trained count.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Run config the checkpoint must agree with.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Expected contour vertex count.
    #[arg(long)]
    pub num_vertices: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: commands::SplitArg,
    #[arg(long)]
    pub stages: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per primitive and loss.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Scale analytic gradients by this factor (harness self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<f64>,
}

/// Exit status for a library error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Geometry(_) => 2,
        // unreadable or malformed checkpoints are bad input, not bad numerics
        Error::Autodiff(AutodiffError::Io(_) | AutodiffError::Checkpoint(_)) => 2,
        Error::Numerical(_) | Error::Autodiff(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

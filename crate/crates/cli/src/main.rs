use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod run_manifest;

/// Lung segmentation in CT with progressive holistically-nested networks.
#[derive(Parser, Debug)]
#[command(name = "phnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Window, sample and pad training slices for every manifest entry.
    Preprocess(PreprocessArgs),
    /// Assign patients to cross-validation folds.
    Split(SplitArgs),
    /// Train on one fold and calibrate its threshold.
    Train(TrainArgs),
    /// Segment one volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every operator and of the network loss.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic CT corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON file receiving the split.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the checkpoint's calibrated threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cumulative Dice histogram CSV.
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Network configuration for the loss check; defaults to a 3-stage network.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the run manifest; logged to stderr when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn threads_from_env() -> usize {
    match std::env::var("PHNN_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        None | Some(0) => 1,
        Some(n) => n,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = threads_from_env();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Segment(a) => commands::segment(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

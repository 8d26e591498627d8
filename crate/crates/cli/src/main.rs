//! `fashionflow`: generate data, train, sample, interpolate and evaluate
//! from the command line.
//!
//! Exit status is 0 on success, 1 when a request is invalid (bad flags,
//! violated preconditions, numeric failure) and 2 on I/O or file-format
//! errors.

mod commands;
mod grid;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "fashionflow", version, about = "Image-to-video latent diffusion on synthetic fashion clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (80/20 train/test split).
    GenData(GenData),
    /// Pretrain and freeze the autoencoder.
    TrainVae(TrainVae),
    /// Train the diffusion model.
    Train(Train),
    /// Generate videos from conditioning images.
    Sample(Sample),
    /// Fill masked frames of a video.
    Interpolate(Interpolate),
    /// Score generated videos against real ones.
    Eval(Eval),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheck),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 80)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainVae {
    /// Dataset root holding train/ (and optionally test/).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 6e-3)]
    lr: f64,
    /// Crop side for training; 0 trains on whole frames.
    #[arg(long, default_value_t = 32)]
    crop: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained autoencoder checkpoint.
    #[arg(long)]
    vae: PathBuf,
    /// Run directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` config file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a diffusion checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "vae_seed"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    width_scale: Option<String>,
    #[arg(long)]
    interpolation: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the fixed image embedder.
    #[arg(long = "embed-seed")]
    vae_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Sample {
    #[arg(long)]
    ckpt: PathBuf,
    /// A conditioning image file, or a directory of `cond_*.vten` files.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Reverse steps; fewer than the trained T strides the schedule.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Defaults to the mode the checkpoint was trained with.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (or directory when --image is a directory).
    #[arg(long)]
    out: PathBuf,
    /// Skip writing PNG frame grids.
    #[arg(long)]
    no_grid: bool,
}

#[derive(Args, Debug)]
struct Interpolate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    video: PathBuf,
    /// `alternate` or `random`.
    #[arg(long, default_value = "alternate")]
    pattern: String,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    /// Fraction of the chain to run, starting from the noised nearest visible frames (0, 1].
    #[arg(long, default_value_t = fashionflow::training::INTERP_STRENGTH)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_grid: bool,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    /// `fvd`, `vfid` or `is`.
    #[arg(long, default_value = "fvd")]
    metric: String,
    /// Frames read by fvd.
    #[arg(long, default_value_t = fashionflow::metrics::FVD_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradCheck {
    #[arg(long, default_value_t = 50)]
    trials: u64,
    /// Check in 64-bit instead of 32-bit precision.
    #[arg(long)]
    f64: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn configure_threads() -> fashionflow::Result<()> {
    if let Ok(v) = std::env::var("FF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| fashionflow::Error::Config(format!("FF_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(fashionflow::Error::Config("FF_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fashionflow::Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainVae(a) => commands::train_vae(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Eval(a) => commands::eval(a),
        Command::GradCheck(a) => commands::grad_check(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}

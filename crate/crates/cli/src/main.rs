//! `ldc`: encode, decode, train and evaluate the latent diffusion codec.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ldc_core::checkpoint::CHECKPOINT_DIR_ENV;
use ldc_core::param_estimator::TRAINED_LAMBDAS;
use ldc_core::ErrorClass;

mod commands;

/// Exit status for unreadable or unwritable files (sysexits EX_IOERR).
const EXIT_IO: u8 = 74;
/// Exit status for invalid input or configuration (sysexits EX_DATAERR).
const EXIT_VALIDATION: u8 = 65;
/// Exit status for internal failures (sysexits EX_SOFTWARE).
const EXIT_INTERNAL: u8 = 70;

#[derive(Parser, Debug)]
#[command(name = "ldc", version, about = "Latent diffusion image codec")]
struct Cli {
    /// Checkpoint directory with manifest.toml and the four weight files.
    #[arg(long, global = true, env = CHECKPOINT_DIR_ENV)]
    checkpoint_dir: Option<PathBuf>,
    /// Compute device; only "cpu" is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Seed for training and randomized procedures.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Desk-scale defaults.
    Default,
    /// Small models that train in minutes.
    Quick,
    /// Tiny models for smoke tests.
    Smoke,
    /// Full-size schedule.
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress an image into an .ldc stream.
    Encode {
        input: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write this timestep instead of the predicted one.
        #[arg(long)]
        timestep: Option<usize>,
        /// Largest accepted image, in pixels.
        #[arg(long)]
        max_pixels: Option<usize>,
    },
    /// Reconstruct an image from an .ldc stream.
    Decode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_pixels: Option<usize>,
    },
    /// Train the codec and write a checkpoint directory.
    Train {
        /// TOML training configuration; replaces the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        /// Override the number of codec steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics file.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate the codec on every image in a directory.
    Eval {
        dir: PathBuf,
        #[arg(long = "lambda", value_delimiter = ',', default_values_t = TRAINED_LAMBDAS)]
        lambdas: Vec<f64>,
        /// CSV of per-image records.
        #[arg(long)]
        out: PathBuf,
        /// Directory for rate-distortion SVG plots.
        #[arg(long)]
        plots: Option<PathBuf>,
        /// Smallest set size for the FID-like score.
        #[arg(long, default_value_t = 2)]
        min_fid_samples: usize,
    },
    /// Naive quantize-and-deflate grid over quantization and diffusion steps.
    Sweep {
        dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [2.0f32, 1.0, 0.5, 0.25, 0.125])]
        steps: Vec<f32>,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 5, 10, 25, 50])]
        diffusion_steps: Vec<usize>,
        /// Also evaluate the learned codec at these lambdas.
        #[arg(long = "lambda", value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Monte Carlo Elo ranking of a pairwise comparison log.
    Elo {
        /// CSV with participant,image,method_a,method_b,winner.
        log: PathBuf,
        /// per_comparison or per_participant.
        #[arg(long, default_value = "per_comparison")]
        mode: String,
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 32.0)]
        k_factor: f64,
        #[arg(long, default_value_t = 1000.0)]
        initial_rating: f64,
        /// Reject rows naming any other method.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// CSV of per-method ratings.
        #[arg(long)]
        out: Option<PathBuf>,
        /// SVG box plot.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Time encode and decode and report parameter counts.
    Bench {
        dir: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        lambda: f64,
        /// Also time decodes forced to these timesteps.
        #[arg(long, value_delimiter = ',')]
        decode_timesteps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write procedurally generated training images.
    SyntheticCorpus {
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Write a simulated comparison log.
    SyntheticLog {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        rows: usize,
        #[arg(long, default_value_t = 20)]
        participants: usize,
        #[arg(long, default_value_t = 24)]
        images: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Io => EXIT_IO,
                ErrorClass::Validation => EXIT_VALIDATION,
                ErrorClass::Internal => EXIT_INTERNAL,
            })
        }
    }
}

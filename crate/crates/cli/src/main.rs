//! `promotion` command line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "promotion", version, about = "Prior-guided video deblurring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random draw the command makes.
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Glob for frame files inside input directories.
    #[arg(long, default_value = "*.png")]
    pattern: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write contrast, gradient and motion prior maps of a 5-frame clip as PNGs.
    Priors {
        /// Clip directory; longer sequences use the window around their middle frame.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Center-frame flow as a .flo file instead of the built-in estimator.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the blur reasoning vector of a 5-frame clip as JSON.
    Blurvec {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Also write the JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Block-matching flow from frame A to frame B, written as .flo.
    Flow {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 16)]
        block: usize,
        #[arg(long, default_value_t = 8)]
        radius: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the color-coded flow as PNG.
        #[arg(long)]
        color: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize blurry frames from a sharp sequence.
    Synth {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Virtual frames averaged per output frame.
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// Virtual frame rate multiplier.
        #[arg(long, default_value_t = 8)]
        up: usize,
        #[arg(long, default_value_t = 2.2)]
        gamma: f64,
        #[command(flatten)]
        common: Common,
    },
    /// PSNR and SSIM of predicted frames against ground truth, as JSON.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Overfit the model on one clip; writes checkpoint, loss log and summary.
    TrainToy {
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Blurry clip directory; a synthetic clip is generated when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Sharp center frame for `--in`.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Center-frame flow as a .flo file instead of the built-in estimator.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        /// `adam` or `gd`.
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        reduction: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Square crop size; must be a multiple of 4.
        #[arg(long)]
        crop: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Deblur every frame of a sequence with a trained checkpoint.
    Infer {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of per-frame center flows (`*.flo`, one per input frame).
        #[arg(long)]
        flow_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Usage problems exit with 1, failures on the data with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(promotion::Error),
}

impl From<promotion::Error> for Failure {
    fn from(e: promotion::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    let text = e.to_string();
                    eprintln!("{}", text.lines().next().unwrap_or("error: bad arguments"));
                    ExitCode::from(1)
                }
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

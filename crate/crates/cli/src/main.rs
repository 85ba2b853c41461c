//! `ganmark`: train a watermark codec, warm up a GAN, fine-tune it to carry
//! an owner watermark, generate images, verify ownership and sweep robustness.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Why a command stopped. Each maps to a distinct exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or input; nothing was computed. Exit 1.
    Validation(String),
    /// The computation itself failed. Exit 2.
    Runtime(String),
    /// Finished, but the result missed its acceptance threshold. Exit 3.
    Threshold(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Threshold(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "validation error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime failure: {m}"),
            Failure::Threshold(m) => write!(f, "acceptance threshold missed: {m}"),
        }
    }
}

impl From<ganmark::Error> for Failure {
    fn from(e: ganmark::Error) -> Self {
        use ganmark::Error as E;
        match e {
            E::InvalidInput(_) | E::Config(_) | E::ShapeMismatch { .. } | E::LengthMismatch { .. } => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

pub const DEVICE_VAR: &str = "GANMARK_DEVICE";

#[derive(Parser)]
#[command(name = "ganmark", version, about = "Supervised GAN watermarking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the watermark encoder/decoder on the dataset directory.
    TrainCodec(Common),
    /// Conventional GAN training without a watermark.
    Warmup(Common),
    /// Fine-tune a warmed-up GAN against the frozen decoder.
    Finetune(commands::FinetuneArgs),
    /// Write generator samples as PNG files.
    Generate(commands::GenerateArgs),
    /// Decode a directory of images and decide ownership.
    Verify(commands::VerifyArgs),
    /// Robustness sweeps under real image processing.
    Sweep(commands::SweepArgs),
    /// Write a procedural toy dataset.
    SynthDataset(commands::SynthArgs),
}

fn check_device() -> Result<(), Failure> {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(Failure::Validation(format!(
            "{DEVICE_VAR}={d}: only the `cpu` device is available"
        ))),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = check_device().and_then(|()| match cli.command {
        Command::TrainCodec(c) => commands::train_codec(&c),
        Command::Warmup(c) => commands::warmup(&c),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::SynthDataset(a) => commands::synth_dataset(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ganmark: {f}");
            ExitCode::from(f.code())
        }
    }
}

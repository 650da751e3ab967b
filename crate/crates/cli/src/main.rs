//! Command-line front end: featurize audio, generate synthetic data, train,
//! evaluate with and without noise, dump feature maps and check gradients.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tsattn::Error;

#[derive(Parser, Debug)]
#[command(
    name = "tsattn",
    version,
    about = "Parallel temporal-spectral attention for sound classification"
)]
struct Cli {
    /// Worker threads (falls back to TSATTN_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Audio frontend settings shared by every command that reads WAV files.
#[derive(Args, Debug, Clone)]
struct FrontendArgs {
    /// Target sample rate in Hz.
    #[arg(long, default_value_t = 44100)]
    sample_rate: u32,
    /// Clips are padded or truncated to this many seconds.
    #[arg(long, default_value_t = 5.0)]
    clip_seconds: f64,
    #[arg(long, default_value_t = 40)]
    n_mels: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cache log-mel features for every clip of a manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        frontend: FrontendArgs,
    },
    /// Write a labeled synthetic dataset and its manifest.
    SynthDataset {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        n_per_class: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        /// Peak level of the class-independent noise burst (0 disables it).
        #[arg(long, default_value_t = tsattn::synth::DISTRACTOR_LEVEL)]
        distractor_level: f64,
    },
    /// Train a model on the manifest rows outside the evaluation fold.
    Train(TrainArgs),
    /// Accuracy on the evaluation fold.
    Evaluate {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Accuracy on the evaluation fold with noise mixed in at a given SNR.
    NoiseEval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum)]
        kind: NoiseKindArg,
        /// Noise clip for `--kind external`.
        #[arg(long)]
        noise_file: Option<PathBuf>,
        /// Signal-to-noise ratio in dB (`inf` for no noise).
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
    },
    /// Write the channel-averaged output of one block as TSFA plus CSV.
    DumpMaps {
        #[arg(long)]
        model: PathBuf,
        /// A WAV clip or a cached `.tsfa` feature.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
        /// Add Gaussian noise to a stripe of the feature before the forward pass.
        #[arg(long, value_enum, requires_all = ["mask_start", "mask_end"])]
        mask_axis: Option<AxisArg>,
        #[arg(long, requires = "mask_axis")]
        mask_start: Option<usize>,
        #[arg(long, requires = "mask_axis")]
        mask_end: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        frontend: FrontendArgs,
    },
    /// Finite-difference gradient check of one operation, or `all`.
    Gradcheck {
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// One of the named models, optionally with a `-small` suffix.
    #[arg(long, default_value = "TS-CNN10")]
    preset: String,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV to write.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// `key=value` training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature cache written by `featurize`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    mixup_alpha: Option<f64>,
    #[arg(long)]
    time_masks: Option<usize>,
    #[arg(long)]
    max_time_width: Option<usize>,
    #[arg(long)]
    freq_masks: Option<usize>,
    #[arg(long)]
    max_freq_width: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_fold: Option<u32>,
    #[arg(long)]
    stop_at_eval_acc: Option<f64>,
    #[command(flatten)]
    frontend: FrontendArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 2)]
    fold: u32,
    /// Report CSV to append to (printed to stdout when absent).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Name for the model column; defaults to the checkpoint file stem.
    #[arg(long)]
    label: Option<String>,
    /// Reject the checkpoint unless it was built from this preset.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    frontend: FrontendArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NoiseKindArg {
    Gaussian,
    External,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    Time,
    Frequency,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_io() || matches!(e, Error::Format(_)) {
            Failure::Io(msg)
        } else if e.is_numeric() {
            Failure::Numeric(msg)
        } else {
            Failure::Validation(msg)
        }
    }
}

fn init_threads(flag: Option<usize>) -> Result<(), Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("TSATTN_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Failure::Validation(format!("TSATTN_THREADS={v:?} is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Validation("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Validation(e.to_string()))?;
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
    let result = init_threads(cli.threads).and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

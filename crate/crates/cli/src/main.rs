//! `kernelpan` command-line tool.
//!
//! Exit codes: 0 success, 1 internal error, 2 config error, 3 data error,
//! 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kernelpan::inference::MergeMode;
use kernelpan::Error;

#[derive(Parser, Debug)]
#[command(name = "kernelpan", version, about = "Kernel-generating panoptic segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dot-path override such as `model.c_e=32`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic samples and an index to a directory.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Seed of the first sample (default: train.data_seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes metrics.jsonl and checkpoints/{last,best}.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Train on a sample directory instead of generated scenes.
        #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Generate training scenes from the config (the default).
        #[arg(long)]
        synthetic: bool,
        /// Continue from a checkpoint directory.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
    },
    /// Predict panoptic labels (PNG + JSON) for every sample of a directory.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint directory, or a training output directory.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Sample directory with an index.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Use ground-truth centers and stuff regions.
        #[arg(long)]
        oracle_pos: bool,
        /// Use ground-truth classes.
        #[arg(long)]
        oracle_class: bool,
    },
    /// Compute PQ of predicted labels against ground truth.
    Eval {
        /// Directory of panoptic labels, or a sample directory.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Directory of panoptic labels, or a sample directory.
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
        /// Where to write pq.json and pq.csv (default: the prediction directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration as JSON.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Colorize panoptic labels (or the ground truth of a sample directory).
    Render {
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Heuristic,
    Argmax,
}

impl From<Mode> for MergeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Heuristic => MergeMode::Heuristic,
            Mode::Argmax => MergeMode::Argmax,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Png(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape(_) | Error::MissingGradient(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, count, seed } => commands::synth(&config, &out, count, seed),
        Command::Train { config, out, data, synthetic: _, resume } => {
            commands::train(&config, &out, data.as_deref(), resume.as_deref())
        }
        Command::Infer {
            config,
            checkpoint,
            input,
            out,
            mode,
            oracle_pos,
            oracle_class,
        } => commands::infer(&commands::InferArgs {
            config,
            checkpoint,
            input,
            out,
            mode: mode.map(Into::into),
            oracle_pos,
            oracle_class,
        }),
        Command::Eval { pred, gt, out } => commands::eval(&pred, &gt, out.as_deref()),
        Command::Render { input, out } => commands::render(&input, &out),
        Command::Config { config } => commands::print_config(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

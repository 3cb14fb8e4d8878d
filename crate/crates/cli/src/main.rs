//! `dybnn` command-line tool.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data
//! error, 4 numerical failure.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::Value;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    /// Classifies a library error; I/O errors count as failures of whatever
    /// the caller was reading, so callers map those themselves.
    pub fn from_core(e: dybnn::Error) -> Self {
        use dybnn::Error as E;
        let code = match &e {
            E::InvalidConfig { .. }
            | E::ShapeMismatch { .. }
            | E::PaddingOverflow { .. }
            | E::Format { .. }
            | E::Version { .. } => 2,
            E::MagicMismatch { .. }
            | E::LengthMismatch { .. }
            | E::RecordSizeMismatch { .. }
            | E::Malformed { .. } => 3,
            E::NonFiniteLoss { .. } | E::NonFinite { .. } => 4,
            _ => 1,
        };
        let message = e.to_string().lines().next().unwrap_or_default().to_string();
        CliError { code, message }
    }
}

#[derive(Parser)]
#[command(name = "dybnn", version, about = "Train, evaluate and cost binary networks with dynamic activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config or bundled config name.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print per-layer BOPs, FLOPs and OPs of a model.
    CountOps(CountArgs),
    /// Compare the operation counts of two models layer by layer.
    CompareOps(CompareArgs),
    /// Write a bundled or resolved config, or a checkpoint as JSON.
    Export(ExportArgs),
    /// Summarize a checkpoint or config.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file or bundled config name.
    config: String,
    /// Override a config value, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: runs/<model name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (overrides data.dir and DYBNN_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for both initialization and data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Teacher checkpoint for distillation.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Use only the first N samples of each split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    OneStep,
    TwoStep,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Distill,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    checkpoint: PathBuf,
    /// Dataset directory (default: DYBNN_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// mnist or cifar10 (default: inferred from the model input).
    #[arg(long)]
    dataset: Option<String>,
    /// Evaluate only the first N test samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    /// One JSON object per line.
    Structured,
}

#[derive(Args)]
struct CountArgs {
    /// Config file or bundled config name.
    config: String,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// FLOPs charged per BN output element.
    #[arg(long, default_value_t = 1)]
    bn_flops: i128,
    /// FLOPs charged per PReLU output element.
    #[arg(long, default_value_t = 1)]
    prelu_flops: i128,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline config file or bundled config name.
    a: String,
    /// Config to compare against the baseline.
    b: String,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long, default_value_t = 1)]
    bn_flops: i128,
    #[arg(long, default_value_t = 1)]
    prelu_flops: i128,
}

#[derive(Args)]
struct ExportArgs {
    /// Bundled config name, config file, or checkpoint.
    source: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// List the bundled configs.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint, config file, or bundled config name.
    source: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => {
            let mut overrides = a.overrides;
            if let Some(seed) = a.seed {
                overrides.push(format!("train.seed={seed}"));
                overrides.push(format!("model.seed={seed}"));
            }
            if let Some(p) = a.protocol {
                let p = match p {
                    ProtocolArg::OneStep => "one-step",
                    ProtocolArg::TwoStep => "two-step",
                };
                overrides.push(format!("train.protocol=\"{p}\""));
            }
            if let Some(l) = a.loss {
                let l = match l {
                    LossArg::Ce => "cross-entropy",
                    LossArg::Distill => "distillation",
                };
                overrides.push(format!("train.loss=\"{l}\""));
            }
            if let Some(t) = &a.teacher {
                overrides.push(format!("train.teacher={}", toml_string(&t.display().to_string())));
            }
            if let Some(n) = a.limit {
                overrides.push(format!("data.train_limit={n}"));
                overrides.push(format!("data.test_limit={n}"));
            }
            if let Some(d) = &a.data {
                overrides.push(format!("data.dir={}", toml_string(&d.display().to_string())));
            }
            commands::train(&a.config, &overrides, a.out.as_deref())
        }
        Command::Eval(a) => commands::eval(
            &a.checkpoint,
            a.data.as_deref(),
            a.dataset.as_deref(),
            a.limit,
            a.batch_size,
        ),
        Command::CountOps(a) => {
            commands::count_ops(&a.config, &a.overrides, a.format == Format::Structured, a.bn_flops, a.prelu_flops)
        }
        Command::CompareOps(a) => {
            commands::compare_ops(&a.a, &a.b, a.format == Format::Structured, a.bn_flops, a.prelu_flops)
        }
        Command::Export(a) => {
            if a.list {
                commands::list_presets()
            } else if let Some(src) = a.source {
                commands::export(&src, &a.overrides, a.out.as_deref())
            } else {
                Err(CliError::config("export needs a source or --list"))
            }
        }
        Command::Inspect(a) => commands::inspect(&a.source),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn toml_string(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

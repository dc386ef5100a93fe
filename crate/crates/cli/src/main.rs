use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;

use error::CliError;

/// Train, evaluate and inspect iterative adaptive-computation networks.
#[derive(Parser, Debug)]
#[command(name = "iamnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write checkpoints, metrics and a summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy and per-sample compute.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts for a configuration.
    Count(CountArgs),
    /// Write iteration histograms and an easy-to-hard ranking for a checkpoint.
    Analyze(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (`key = value` lines). Defaults to the desk preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory holding the CIFAR binary files (CIFAR data sources only).
    #[arg(long, value_name = "PATH")]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for checkpoints, metrics and the summary.
    #[arg(long, value_name = "PATH")]
    out_dir: PathBuf,
    /// Overrides train.seed (and data.seed for synthetic data).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.max_steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Overrides train.act_tau.
    #[arg(long)]
    tau: Option<f64>,
    /// Resume from this checkpoint instead of initializing fresh weights.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to load. Its embedded configuration is used unless
    /// --config is given, in which case the two must agree.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Output directory for report files.
    #[arg(long, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    /// Dataset split; the synthetic test split is the validation set.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Overrides data.seed for synthetic data.
    #[arg(long)]
    seed: Option<u64>,
    /// Also report top-k accuracy for this k.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    common: Common,
    /// Compare against a reference network: resnet18, resnet101 or resnet152.
    #[arg(long)]
    reference: Option<String>,
    /// Square input side; overrides the configured input height and width.
    #[arg(long)]
    input_size: Option<usize>,
    /// Also write count.json here.
    #[arg(long, value_name = "PATH")]
    out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Count(a) => commands::count(&a),
        Command::Analyze(a) => commands::analyze(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

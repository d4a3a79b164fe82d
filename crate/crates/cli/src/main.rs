//! laplace-net: graph-interpolating classification toolkit.
//!
//! `laplace-net <gen-data|interpolate|train|pgd-train|attack|eval|pca2d>
//!   --config <path> [--threads N] [--out DIR]`
//!
//! Exit codes: 0 success, 2 config/usage error, 3 data/format error,
//! 4 numeric failure.

mod commands;
mod config;
mod dataset;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Core(laplace_net_core::Error),
}

impl CliError {
    pub fn config(msg: String) -> Self {
        CliError::Config(msg)
    }

    pub fn io(msg: String) -> Self {
        CliError::Io(msg)
    }

    pub fn exit_code(&self) -> u8 {
        use laplace_net_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(core) => match core {
                E::Parameter(_) | E::Usage(_) | E::Structure(_) => 2,
                E::Format { .. } | E::Io { .. } => 3,
                E::Numeric(_) => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Io(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<laplace_net_core::Error> for CliError {
    fn from(e: laplace_net_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser)]
#[command(name = "laplace-net", version, about = "Graph-interpolating classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Cap the worker-thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or convert a dataset.
    GenData(RunArgs),
    /// Raw-feature interpolating classifier vs softmax regression.
    Interpolate(RunArgs),
    /// Alternating natural training.
    Train(RunArgs),
    /// Alternating adversarial training.
    PgdTrain(RunArgs),
    /// Craft one adversarial batch from a trained model.
    Attack(RunArgs),
    /// Natural/robust accuracy report, white-box or black-box.
    Eval(RunArgs),
    /// First two principal components of buffered features.
    Pca2d(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Interpolate(_) => "interpolate",
            Command::Train(_) => "train",
            Command::PgdTrain(_) => "pgd-train",
            Command::Attack(_) => "attack",
            Command::Eval(_) => "eval",
            Command::Pca2d(_) => "pca2d",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::GenData(a)
            | Command::Interpolate(a)
            | Command::Train(a)
            | Command::PgdTrain(a)
            | Command::Attack(a)
            | Command::Eval(a)
            | Command::Pca2d(a) => a,
        }
    }
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let args = cli.command.args();

    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }

    let (config, config_bytes) = config::load_config(&args.config)?;
    let report = commands::run_command(cli.command.name(), &config, &config_bytes, &args.out)?;
    report.write(&args.out)?;
    for (metric, value) in &report.metrics {
        println!("{metric} = {value}");
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

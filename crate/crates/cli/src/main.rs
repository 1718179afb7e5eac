//! `cfalign`: generate data, train models and run counterfactual alignment
//! experiments from JSON configs.

mod artifacts;
mod commands;
mod context;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use cfalign::models::TrainMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::train::Overrides;
use crate::context::Context;
use crate::exit::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "cfalign", version, about = "Counterfactual alignment toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config for the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-sample and per-row work. Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train the autoencoder and/or attribute classifiers.
    Train(TrainArgs),
    /// Alignment matrix with prediction and label correlations.
    Align,
    /// Counterfactuals and prediction sweeps for chosen samples.
    Cf,
    /// Plant a bias by composition and measure it.
    Bias,
    /// Remove a planted bias by optimizing its coefficient.
    Rectify(RectifyArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Erm,
    #[value(name = "worst_group")]
    WorstGroup,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training objective for every classifier.
    #[arg(long)]
    mode: Option<Mode>,
    /// Group-weight step size for worst_group.
    #[arg(long)]
    eta: Option<f64>,
    /// Sensitive attribute for worst_group.
    #[arg(long)]
    sensitive: Option<String>,
}

#[derive(Args, Debug)]
struct RectifyArgs {
    /// Continue from `<out>/<target>/state.json` where present.
    #[arg(long)]
    resume: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train(_) => "train",
            Command::Align => "align",
            Command::Cf => "cf",
            Command::Bias => "bias",
            Command::Rectify(_) => "rectify",
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let name = cli.command.name();
    let config = cli
        .config
        .ok_or_else(|| CliError::config(format!("{name} needs --config <PATH>")))?;
    let out = cli.out.ok_or_else(|| CliError::config(format!("{name} needs --out <DIR>")))?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::config("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot start {n} workers: {e}")))?;
    }
    let ctx = Context::new(name, &config, &out, cli.seed, cli.verbose)?;
    match cli.command {
        Command::GenData => commands::gen_data::run(&ctx),
        Command::Train(args) => {
            let overrides = Overrides {
                mode: args.mode.map(|m| match m {
                    Mode::Erm => TrainMode::Erm,
                    Mode::WorstGroup => TrainMode::WorstGroup,
                }),
                eta: args.eta,
                sensitive: args.sensitive,
            };
            commands::train::run(&ctx, &overrides)
        }
        Command::Align => commands::align::run(&ctx),
        Command::Cf => commands::cf::run(&ctx),
        Command::Bias => commands::bias::run(&ctx),
        Command::Rectify(args) => commands::rectify::run(&ctx, args.resume),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

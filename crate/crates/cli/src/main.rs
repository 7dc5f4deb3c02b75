//! `msgam`: fit, simulate, decode and compare Markov-switching additive models.

mod commands;
mod config;
mod dataset;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Context;

#[derive(Parser)]
#[command(name = "msgam", version, about = "Markov-switching generalized additive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model, selecting λ on the configured grid unless it is fixed.
    Fit(Common),
    /// Run smoothing-parameter selection only and write the score table.
    Select(Common),
    /// Simulate a dataset from a built-in or custom scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Built-in scenario: I, II or III.
        #[arg(long)]
        scenario: Option<String>,
    },
    /// Most probable state sequence under a fitted model.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Response column (default: first non-covariate column).
        #[arg(long)]
        response: Option<String>,
    },
    /// Parametric bootstrap confidence bands for a fitted model.
    Bands {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Rolling one-step-ahead log scores for the configured models.
    Forecast(Common),
}

fn context(common: &Common, model: Option<PathBuf>) -> Context {
    Context {
        config: common.config.clone(),
        data: common.data.clone(),
        model,
        out: common.out.clone(),
        seed: common.seed,
    }
}

fn setup(common: &Common) {
    let level = if common.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = common.threads {
        if n == 0 || !msgam::exec::configure_threads(n) {
            log::warn!("could not set thread count to {n}; using defaults");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(c) => {
            setup(c);
            commands::cmd_fit(&context(c, None))
        }
        Command::Select(c) => {
            setup(c);
            commands::cmd_select(&context(c, None))
        }
        Command::Simulate { common, scenario } => {
            setup(common);
            commands::cmd_simulate(&context(common, None), scenario.as_deref())
        }
        Command::Decode {
            common,
            model,
            response,
        } => {
            setup(common);
            commands::cmd_decode(&context(common, Some(model.clone())), response.as_deref())
        }
        Command::Bands { common, model } => {
            setup(common);
            commands::cmd_bands(&context(common, Some(model.clone())))
        }
        Command::Forecast(c) => {
            setup(c);
            commands::cmd_forecast(&context(c, None))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

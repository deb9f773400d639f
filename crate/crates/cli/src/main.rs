//! `grin`: build graphs, simulate data, mask, train, impute and evaluate.

mod commands;
mod config;
mod plot;
mod prepare;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{BuildGraphArgs, EvaluateArgs, Global, ImputeArgs, MakeMaskArgs, SimulateArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "grin", version, about = "Graph recurrent imputation for multivariate time series")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sequential, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "GRIN_NUM_THREADS", global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an edge list from distances or from series similarity.
    BuildGraph(BuildGraphArgs),
    /// Simulate the charged-particle benchmark.
    Simulate(SimulateArgs),
    /// Sample an evaluation mask.
    MakeMask(MakeMaskArgs),
    /// Train a model and score it on the test split.
    Train(TrainArgs),
    /// Fill every missing entry with a trained model.
    Impute(ImputeArgs),
    /// Score a checkpoint or an imputed table.
    Evaluate(EvaluateArgs),
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let g = Global { config: cli.config, seed: cli.seed, deterministic: cli.deterministic };
    match &cli.command {
        Command::BuildGraph(a) => commands::build_graph(&g, a),
        Command::Simulate(a) => commands::simulate(&g, a),
        Command::MakeMask(a) => commands::make_mask(&g, a),
        Command::Train(a) => commands::train_cmd(&g, a),
        Command::Impute(a) => commands::impute(&g, a),
        Command::Evaluate(a) => commands::evaluate_cmd(&g, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

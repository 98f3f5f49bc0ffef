mod artifacts;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::PipelineConfig;
use pipeline::{Pipeline, Stage};

/// Partitioned embedding-based retrieval pipeline.
#[derive(Parser, Debug)]
#[command(name = "ebr", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "ebr.toml")]
    config: PathBuf,
    /// Override a config key, e.g. `encoder.epochs=5`. Repeatable.
    #[arg(long = "stage-override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fail instead of rebuilding when artifacts do not match the config.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Parse, filter and split the dataset.
    Prepare,
    /// Train item embeddings for clustering.
    Item2vec,
    /// Partition items with k-means.
    Cluster,
    /// Train every configured method.
    Train,
    /// Train the next-cluster intent head.
    Intent,
    /// Write candidate lists for every user.
    Retrieve,
    /// Compute recall metrics for every method.
    Eval,
    /// Render the metrics table.
    Report,
    /// Run every stage in order.
    All,
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = PipelineConfig::load(&cli.config, &cli.overrides, cli.seed)?;
    let mut p = Pipeline::new(cfg, cli.strict)?;
    let stage = match cli.command {
        Command::All => None,
        Command::Prepare => Some(Stage::Prepare),
        Command::Item2vec => Some(Stage::Item2vec),
        Command::Cluster => Some(Stage::Cluster),
        Command::Train => Some(Stage::Train),
        Command::Intent => Some(Stage::Intent),
        Command::Retrieve => Some(Stage::Retrieve),
        Command::Eval => Some(Stage::Eval),
        Command::Report => Some(Stage::Report),
    };
    match stage {
        Some(s) => p.run(s)?,
        None => p.run_all()?,
    }
    if matches!(stage, None | Some(Stage::Report)) {
        print!("{}", std::fs::read_to_string(p.artifacts().path("report", "report.txt"))?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `hpl`: task generation, demonstrations, training, closed-loop runs,
//! evaluation and plots.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hpl", version, about = "Hierarchical predictive learning on tube-navigation tasks")]
pub struct Cli {
    /// TOML project config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write `n` random tubes as task files.
    GenTasks {
        #[arg(long)]
        n: usize,
    },
    /// Record demonstrations, on task files or on `n` freshly generated tubes.
    Demo {
        /// Glob of task files.
        #[arg(long, conflicts_with = "n")]
        tasks: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the strategy models on a demonstration directory.
    Train {
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Run HPL (and the safety-controller baseline) on task files.
    Run {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<String>,
        /// Also run every task on its reversed tube.
        #[arg(long)]
        reverse: bool,
        #[arg(long)]
        run_id: Option<String>,
        /// Skip the baseline runs.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Re-check and aggregate a run directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Render a run directory as SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

// `Real as f64` casts look redundant in the default build but are
// load-bearing when gt-core's single-precision feature narrows `Real`.
#![allow(clippy::unnecessary_cast)]

//! `gt` — partition, train, evaluate and verify staged-GNN runs.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gt_core::CoreError;

#[derive(Parser)]
#[command(name = "gt", version, about = "Distributed staged GNN training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Bitwise-reproducible execution (exact accumulation, serialized tasks).
    #[arg(long)]
    deterministic: bool,
    /// Override the partition count.
    #[arg(long)]
    partitions: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to report: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug, Clone)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Self-test hook: corrupt one backward pass and expect a FAIL.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug, Clone)]
struct OracleArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random instances per check.
    #[arg(long, default_value_t = 10)]
    cases: usize,
    /// Node-count cap for the dense comparisons.
    #[arg(long, default_value_t = 32)]
    max_nodes: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a dataset and detect clusters; writes plan and cluster files.
    Partition(CommonArgs),
    /// Train per the run configuration; writes metrics and checkpoints.
    Train(CommonArgs),
    /// Evaluate a checkpoint: accuracy and macro-F1 on a split.
    Eval(EvalArgs),
    /// Run the gradient/oracle verification suite.
    Gradcheck(GradcheckArgs),
    /// Spectral-oracle equivalence sweep for debugging.
    Oracle(OracleArgs),
}

/// Usage/config errors exit 1, numerical failures exit 2.
fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::NonFinite { .. }
        | CoreError::Numerical { .. }
        | CoreError::ShapeMismatch { .. }
        | CoreError::NoSuchEdge { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output exits 0.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Partition(args) => commands::partition::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Eval(args) => commands::eval::run(&args),
        Command::Gradcheck(args) => commands::gradcheck::run(&args),
        Command::Oracle(args) => commands::oracle::run(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

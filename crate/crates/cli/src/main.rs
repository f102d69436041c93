use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtcluster::cli::{cmd_metrics, cmd_run, cmd_validate, RunArgs};

/// Simulate shared-resource orchestration of real-time containers.
#[derive(Parser)]
#[command(name = "rtcluster", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and print every problem found.
    Validate { scenario: PathBuf },
    /// Run a scenario and write its event trace.
    Run {
        scenario: PathBuf,
        /// Where to write the line-delimited trace.
        #[arg(long, default_value = "trace.jsonl")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<u64>,
        /// Do not print the run summary.
        #[arg(long)]
        quiet: bool,
        /// Process nodes on a thread pool. The trace is the same either way.
        #[arg(long)]
        parallel: bool,
    },
    /// Summarize a trace as JSON.
    Metrics {
        trace: PathBuf,
        /// Restrict the summary to one container or node.
        #[arg(long)]
        filter: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOG_LEVEL", "warn")).init();
    let cli = Cli::parse();
    let mut out = io::stdout().lock();
    let mut err = io::stderr().lock();
    let status = match cli.command {
        Command::Validate { scenario } => cmd_validate(&scenario, &mut err),
        Command::Run {
            scenario,
            out: trace,
            seed,
            horizon,
            quiet,
            parallel,
        } => {
            let args = RunArgs {
                seed,
                horizon,
                quiet,
                parallel,
            };
            cmd_run(&scenario, &trace, &args, &mut out, &mut err)
        }
        Command::Metrics { trace, filter } => {
            cmd_metrics(&trace, filter.as_deref(), &mut out, &mut err)
        }
    };
    ExitCode::from(status.code() as u8)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ofo_safety::scenario::{execute, Command, Overrides};

#[derive(Parser)]
#[command(version, about = "Feasible operating regions and safety checks for PCC flexibility dispatch")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep the feasible operating region and cross-check it by sampling
    For(Args),
    /// Run the controller schedule and classify the trajectories
    Run(Args),
    /// Monte Carlo ensemble with density histograms and robustness verdict
    Mc(Args),
}

#[derive(clap::Args)]
struct Args {
    config: PathBuf,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (overrides the scenario's)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the scenario's)
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are config errors; 2 is reserved for numerical failures
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let (command, args) = match cli.command {
        Cmd::For(a) => (Command::For, a),
        Cmd::Run(a) => (Command::Run, a),
        Cmd::Mc(a) => (Command::Mc, a),
    };
    let overrides = Overrides { jobs: args.jobs, out: args.out, seed: args.seed };
    ExitCode::from(execute(command, &args.config, &overrides) as u8)
}

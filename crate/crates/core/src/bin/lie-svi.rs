use clap::{Args, Parser, Subcommand};
use lie_svi::cli::{run_command, CommandKind};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "lie-svi",
    version,
    about = "Spectral variational integrators on SO(3): simulation, reference cross-checks, convergence sweeps, and invariant tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Path to a JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV files
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write per-step CSV rows
    Simulate(RunArgs),
    /// Write spectral and splitting reference trajectories and cross-check them
    Reference(RunArgs),
    /// Sweep the stage count n at fixed h against a reference trajectory
    ConvergeN(RunArgs),
    /// Sweep the step size h at fixed n against a reference trajectory
    ConvergeH(RunArgs),
    /// Track conserved quantities over long runs from several starting momenta
    Invariants(RunArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let (kind, args) = match &cli.command {
        Command::Simulate(args) => (CommandKind::Simulate, args),
        Command::Reference(args) => (CommandKind::Reference, args),
        Command::ConvergeN(args) => (CommandKind::ConvergeN, args),
        Command::ConvergeH(args) => (CommandKind::ConvergeH, args),
        Command::Invariants(args) => (CommandKind::Invariants, args),
    };
    std::process::exit(run_command(kind, &args.config, &args.out));
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sofr_transfer_cli::config::{BenchConfig, RunConfig, SimulateConfig};
use sofr_transfer_cli::{cmd_bench, cmd_fit, cmd_simulate, CliResult};

/// Transfer learning for scalar-on-function regression.
#[derive(Parser)]
#[command(name = "sofr-tl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit estimators on CSV datasets and write their coefficients.
    Fit { config: PathBuf },
    /// Run the simulation benchmark and write per-replicate REE/RPE.
    Bench { config: PathBuf },
    /// Write one simulated target and its sources as CSV datasets.
    Simulate { config: PathBuf },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit { config } => {
            let cfg = RunConfig::load(&config)?;
            cmd_fit(&cfg)?;
            eprintln!("wrote {}", cfg.output.display());
        }
        Command::Bench { config } => {
            let cfg = BenchConfig::load(&config)?;
            let rows = cmd_bench(&cfg)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            eprintln!("wrote {} ({} rows, {failed} failed)", cfg.output.display(), rows.len());
        }
        Command::Simulate { config } => {
            let cfg = SimulateConfig::load(&config)?;
            cmd_simulate(&cfg)?;
            eprintln!("wrote {}", cfg.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

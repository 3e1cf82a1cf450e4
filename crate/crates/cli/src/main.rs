use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ntkdfl_core::{run_experiment, Error, RunConfig};

#[derive(Parser)]
#[command(name = "ntkdfl", version, about = "Decentralized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config, then print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            for dir in run_experiment(&cfg)? {
                println!("{}", dir.display());
            }
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", cfg.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Wrapped errors already print their sources.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

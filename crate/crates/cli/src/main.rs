use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tempered_cli::{run, CliError, Experiment, ExperimentConfig};

/// Run a tempered-posterior experiment and write its CSV table.
#[derive(Debug, Parser)]
#[command(name = "tempered", version)]
struct Args {
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `out` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tempered: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &Args) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    let output = run(args.experiment, &config)?;
    eprintln!("wrote {} rows to {}", output.rows, output.csv.display());
    Ok(())
}

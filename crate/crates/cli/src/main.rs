use std::path::PathBuf;
use std::process::ExitCode;

use bilevel_cli::{execute, parse_spec, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bilevel", version, about = "Run bilevel optimization experiments from a JSON spec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run specification.
    Run {
        spec: PathBuf,
        /// Worker threads for concurrent cells.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output directory; overrides the spec's `output_dir`.
        #[arg(long, env = "BILEVEL_OUT_DIR")]
        out: Option<PathBuf>,
        /// Master seed; overrides the spec's `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let Command::Run { spec, workers, out, seed } = Cli::parse().command;
    let result = parse_spec(&spec).and_then(|mut s| {
        if let Some(seed) = seed {
            s.seed = seed;
        }
        let dir = out.or_else(|| s.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
        execute(&s, &dir, workers).map(|r| (r, dir))
    });
    match result {
        Ok((record, dir)) => {
            println!("{} cells, spec {}, results in {}", record.cells.len(), &record.spec_hash[..12], dir.display());
            for c in record.cells.iter().filter(|c| c.error.is_some()) {
                eprintln!("cell {} failed: {}", c.id, c.error.as_deref().unwrap_or(""));
            }
            if record.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("verification failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{e:#}");
            ExitCode::from(CliError::exit_code(&e))
        }
    }
}

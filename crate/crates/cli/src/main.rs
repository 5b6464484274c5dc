use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sfpe_cli::run::{run_file, Overrides};

/// Monte-Carlo solver for stochastic fixed-point equations.
#[derive(Debug, Parser)]
#[command(name = "sfpe", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output` in the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Refuse Picard runs predicted to take more Euler steps than this.
    #[arg(long)]
    budget: Option<u128>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("config error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("runtime error: {e}");
            return ExitCode::from(3);
        }
    }
    let overrides = Overrides {
        seed: args.seed,
        output: args.output,
        budget: args.budget,
    };
    match run_file(&args.config, &overrides) {
        Ok(outcome) => {
            println!("{} -> {}", outcome.summary, outcome.output_dir.display());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

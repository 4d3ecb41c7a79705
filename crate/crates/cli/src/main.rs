use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mlab::harness::{load_config, run};

/// Run one metric-estimation experiment described by a TOML config.
///
/// Exit status: 0 when the run's checks pass, 2 when a statistical check
/// fails, 1 on any error.
#[derive(Debug, Parser)]
#[command(name = "mlab", version)]
struct Cli {
    /// sample | fit | consistency | fisher | cramer-rao | ref-prior |
    /// heat-trace | sd-fit | decohere
    command: String,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output root in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = load_config(&cli.config, Some(&cli.command), cli.seed, cli.out).and_then(|c| run(&c));
    match outcome {
        Ok(out) => {
            let verdict = if out.record.passed { "pass" } else { "FAIL" };
            println!("{} {verdict} {}", cli.command, out.directory.display());
            if out.record.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use moving_frames::cli::{self, Command, Config, Overrides, Settings};

/// Run one moving-frames experiment and write a JSON report.
#[derive(Debug, Parser)]
#[command(name = "mframes", version)]
struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    command: Command,
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.json and the experiment's artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random map families (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Grid resolution N (overrides the config; ladders are rescaled).
    #[arg(long)]
    resolution: Option<usize>,
    /// Suppress the per-check summary.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let settings = args
        .config
        .as_ref()
        .map_or_else(|| Ok(Config::default()), Config::load)
        .and_then(|c| {
            Settings::resolve(
                args.command,
                &c,
                Overrides {
                    seed: args.seed,
                    resolution: args.resolution,
                },
            )
        });
    let settings = match settings {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mframes: {e}");
            return ExitCode::from(2);
        }
    };
    match cli::run(&settings, args.out.as_deref()) {
        Ok(report) => {
            if !args.quiet {
                let _ = cli::write_summary(std::io::stdout().lock(), &report);
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("mframes: {e}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rovae::report::{diagnose_trust, emit_plotdata};
use rovae::runner::{run_experiment, ExperimentConfig, RunOptions};
use rovae::Error;

/// Noise-sweep experiments for ranking-supervised VAEs.
#[derive(Parser)]
#[command(name = "rovae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every cell of an experiment grid.
    Run {
        config: PathBuf,
        /// Re-run cells that already completed.
        #[arg(long)]
        force: bool,
        /// Print the cell plan without writing anything.
        #[arg(long)]
        dry_run: bool,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Replace the configured seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (overrides the config and ROVAE_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results table into per-metric plot tables.
    Plotdata { results: PathBuf, outdir: PathBuf },
    /// Score trust-based flip detection of a trained ROVAE checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        pairs: PathBuf,
        /// Dataset file; defaults to the run's dataset.txt two levels above the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

const EXIT_CELL_FAILURES: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) | Error::Parse { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_CELL_FAILURES),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            force,
            dry_run,
            jobs,
            seed,
            out,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            if let Some(seed) = seed {
                cfg.grid.seeds = vec![seed];
            }
            let opts = RunOptions {
                force,
                dry_run,
                jobs,
                out,
            };
            match run_experiment(&cfg, &opts) {
                Ok(s) if dry_run => {
                    println!("{} cells already complete", s.skipped);
                    ExitCode::SUCCESS
                }
                Ok(s) => {
                    println!(
                        "{}: {} trained, {} skipped, {} failed",
                        s.run_dir.join("results.csv").display(),
                        s.completed,
                        s.skipped,
                        s.failed
                    );
                    if s.failed > 0 {
                        ExitCode::from(EXIT_CELL_FAILURES)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => exit_for(&e),
            }
        }
        Command::Plotdata { results, outdir } => match emit_plotdata(&results, &outdir) {
            Ok(s) => {
                for f in &s.files {
                    println!("{}", f.display());
                }
                for g in &s.gaps {
                    eprintln!("warning: gap in {g}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => exit_for(&e),
        },
        Command::Diagnose {
            checkpoint,
            pairs,
            data,
        } => {
            let data = data.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .and_then(|cell| cell.parent())
                    .and_then(|cells| cells.parent())
                    .map(|run| run.join("dataset.txt"))
                    .unwrap_or_else(|| PathBuf::from("dataset.txt"))
            });
            match diagnose_trust(&checkpoint, &pairs, &data) {
                Ok(d) => {
                    print!("{}", d.render());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
    }
}

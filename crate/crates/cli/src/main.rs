//! `sifed`: run and evaluate federated language-model experiments.
//!
//! Exit status: 0 success, 2 configuration error, 3 divergence, 4 I/O
//! error, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sifed_core::data::DataError;
use sifed_core::experiment::{evaluate_checkpoint, run_experiment, ExperimentConfig, ExperimentError};

/// Environment variable selecting the number of worker threads.
const THREADS_ENV: &str = "SIFED_THREADS";

#[derive(Parser)]
#[command(name = "sifed", version, about = "Federated training of scale-invariant language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and run metadata.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` settings applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out clients and print the record.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn exit_code(err: &ExperimentError) -> u8 {
    match err {
        ExperimentError::Config(_) | ExperimentError::ShapeMismatch { .. } => 2,
        ExperimentError::Data(DataError::Io { .. }) => 4,
        ExperimentError::Data(_) => 2,
        ExperimentError::Diverged { .. } => 3,
        ExperimentError::Io { .. } | ExperimentError::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = raw.parse().map_err(|_| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| e.to_string())
}

fn execute(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config, overrides, out, resume } => {
            let cfg = ExperimentConfig::from_file(&config, &overrides)?;
            let summary = run_experiment(cfg, &out, resume.as_deref())?;
            let r = &summary.final_record;
            eprintln!(
                "finished {} rounds: loss {:.4}, perplexity {:.3}, accuracy {:.4}",
                summary.rounds_completed, r.loss, r.perplexity, r.accuracy
            );
        }
        Command::Eval { checkpoint, config, overrides } => {
            let cfg = ExperimentConfig::from_file(&config, &overrides)?;
            let record = evaluate_checkpoint(cfg, &checkpoint)?;
            println!("{}", serde_json::to_string(&record).expect("record serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

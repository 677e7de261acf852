//! `adec`: stage-oriented CLI for the adaptive-decoding pipeline.
//!
//! Stages hand work to each other through files under the run's output
//! directory, so experiments are resumable and individually testable.
//! Exit codes: 0 success, 2 configuration/usage errors, 1 runtime
//! failures.

use adaptive_decoding::config::RunConfig;
use adaptive_decoding::runner;
use adaptive_decoding::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable overriding the configured reward endpoint; the
/// --endpoint flag overrides both.
const ENDPOINT_ENV: &str = "ADEC_REWARD_ENDPOINT";

#[derive(Parser)]
#[command(name = "adec", about = "Adaptive temperature decoding pipeline", version)]
struct Cli {
    /// Path to the run configuration (JSON).
    #[arg(long, global = true, default_value = "adec.json")]
    config: PathBuf,

    /// Parallel generation workers.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Remote reward endpoint; overrides config and ADEC_REWARD_ENDPOINT.
    #[arg(long, global = true)]
    endpoint: Option<String>,

    /// Accept artifacts whose config hash differs from the current config.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model and write checkpoints/base.adck.
    Pretrain,
    /// Sample responses per training prompt and build preference pairs.
    GenPairs,
    /// Train the temperature head with the configured loss.
    TrainLpo,
    /// Generate held-out responses with the trained head and baselines.
    Generate,
    /// Score generations and write the evaluation report.
    Eval,
    /// Render report histograms as CSV and SVG.
    Report,
}

fn run(cli: &Cli) -> adaptive_decoding::Result<()> {
    let cfg = RunConfig::load(&cli.config)?;
    let endpoint = cli
        .endpoint
        .clone()
        .or_else(|| std::env::var(ENDPOINT_ENV).ok());
    match cli.command {
        Command::Pretrain => runner::stage_pretrain(&cfg),
        Command::GenPairs => runner::stage_gen_pairs(&cfg, endpoint.as_deref(), cli.workers),
        Command::TrainLpo => runner::stage_train_lpo(&cfg, cli.force),
        Command::Generate => runner::stage_generate(&cfg, cli.workers, cli.force),
        Command::Eval => runner::stage_eval(&cfg, cli.force),
        Command::Report => runner::stage_report(&cfg, cli.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

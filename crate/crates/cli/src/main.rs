//! `schema`: procedure-planning experiments end to end — synthetic worlds,
//! description corpora, training, evaluation, plan decoding, ablations.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration (bad value, unknown key, unusable combination).
    #[error("{0}")]
    Config(String),
    /// Missing input file or unwritable output location.
    #[error("{0}")]
    Io(String),
    /// The command itself failed.
    #[error("{0}")]
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "schema",
    version,
    about = "State-change-aware procedure planning on synthetic worlds"
)]
struct Cli {
    /// Config file, TOML by default (.json parses as JSON); omitted = defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed (also sets world.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Planning horizon
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(3..=6))]
    t: Option<u64>,
    /// Plan decoding mode
    #[arg(long, global = true, value_parser = ["argmax", "viterbi", "prob"])]
    mode: Option<String>,
    /// Output directory for all artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config override as key.path=value (repeatable)
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: dataset, corpus, description features
    GenWorld,
    /// (Re)generate the description corpus through the completion client
    Describe,
    /// Train a planner on the exported dataset
    Train,
    /// Score a trained checkpoint on the held-out split
    Eval,
    /// Decode held-out plans to JSON lines
    Plan,
    /// Train matched arms along one ablation axis and tabulate them
    Ablate,
    /// Zero-shot step classification from the encoders alone
    Stepcls,
}

/// Flags become overrides applied after explicit `--override`s, so the
/// documented quick knobs always win.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(seed) = cli.seed {
        out.push(format!("seed={seed}"));
        out.push(format!("world.seed={seed}"));
    }
    if let Some(t) = cli.t {
        out.push(format!("run.t={t}"));
    }
    if let Some(mode) = &cli.mode {
        out.push(format!("run.mode={}", serde_json::Value::from(mode.clone())));
    }
    if let Some(dir) = &cli.out {
        let dir = dir.display().to_string();
        out.push(format!("run.out_dir={}", serde_json::Value::from(dir)));
    }
    out
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(flag_overrides(cli));
    let cfg = config::load_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenWorld => commands::gen_world(&cfg),
        Command::Describe => commands::describe(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Plan => commands::plan(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Stepcls => commands::stepcls(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One machine-parsable line, whatever went wrong.
            eprintln!("error: {}", e.to_string().replace('\n', "; "));
            ExitCode::from(e.exit_code())
        }
    }
}

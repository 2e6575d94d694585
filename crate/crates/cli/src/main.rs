//! `urban`: batch pipeline from caption fixtures to indicator reports.

mod commands;
mod config;
mod output;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::load_config;
use crate::output::RunDir;

#[derive(Debug, Parser)]
#[command(name = "urban", version, about)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Parent directory for run outputs; overrides `paths.out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Refine captions from every agent and keep the consensus winner per image.
    BuildCaptions,
    /// Consensus scores for a caption candidate file.
    ScoreCaptions,
    /// Train the dual encoder on image-caption pairs.
    Pretrain,
    /// Frozen-encoder region embeddings for a manifest.
    Extract,
    /// Fit the indicator head and predict every region.
    Predict,
    /// Regression metrics per split for a predictions file.
    Evaluate,
    /// Prediction-versus-truth scatter report.
    Report,
    /// Write a synthetic workspace of images, fixtures and a manifest.
    Synth,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::BuildCaptions => "build-captions",
            Command::ScoreCaptions => "score-captions",
            Command::Pretrain => "pretrain",
            Command::Extract => "extract",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::Synth => "synth",
        }
    }
}

fn run(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let parent = cli
        .out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run = RunDir::create(&parent, cli.command.name())?;
    log::info!("{} writing to {}", cli.command.name(), run.path().display());
    let result = match cli.command {
        Command::BuildCaptions => commands::build_captions(&cfg, &run),
        Command::ScoreCaptions => commands::score_captions(&cfg, &run),
        Command::Pretrain => commands::pretrain(&cfg, &run),
        Command::Extract => commands::extract(&cfg, &run),
        Command::Predict => commands::predict(&cfg, &run),
        Command::Evaluate => commands::evaluate_predictions(&cfg, &run),
        Command::Report => commands::report(&cfg, &run),
        Command::Synth => synth::synth(&cfg, &run),
    };
    if result.is_err() {
        // drop the run directory when nothing was written to it
        let _ = std::fs::remove_dir(run.path());
    }
    result.map(|()| run.path().to_path_buf())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {}: {line}", cli.command.name());
            ExitCode::FAILURE
        }
    }
}

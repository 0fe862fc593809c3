//! `saereg`: the SAE regularisation pipeline as subcommands. Result lines go
//! to stdout as JSON, logs to stderr.

mod clf;
mod config;
mod explain;
mod judge;
mod output;
mod sae;
mod sample_size;
mod synth;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "saereg", version, about = "Sparse autoencoder features for regularising embedding classifiers")]
struct Cli {
    /// TOML file with per-command defaults; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    Synth(synth::SynthArgs),
    /// Train a Top-K SAE on an embedding file.
    Pretrain(sae::PretrainArgs),
    /// Fine-tune an SAE with the dead-feature residual objective.
    Finetune(sae::FinetuneArgs),
    /// Collect the top activating spans of every feature.
    Explain(explain::ExplainArgs),
    /// Summarise, verify and rate features; write verdicts and the unintended set.
    Judge(judge::JudgeArgs),
    /// Train a purified, alignment-penalised logistic classifier.
    TrainClf(clf::TrainClfArgs),
    /// Score a classifier on a labelled embedding file.
    Eval(clf::EvalArgs),
    /// Samples needed to estimate a sparse feature's mean activation.
    SampleSize(sample_size::SampleSizeArgs),
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Explain(_) => "explain",
            Command::Judge(_) => "judge",
            Command::TrainClf(_) => "train-clf",
            Command::Eval(_) => "eval",
            Command::SampleSize(_) => "sample-size",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth::run(a, &cfg),
        Command::Pretrain(a) => sae::run_pretrain(a, &cfg),
        Command::Finetune(a) => sae::run_finetune(a, &cfg),
        Command::Explain(a) => explain::run(a, &cfg),
        Command::Judge(a) => judge::run(a, &cfg),
        Command::TrainClf(a) => clf::run_train(a, &cfg),
        Command::Eval(a) => clf::run_eval(a, &cfg),
        Command::SampleSize(a) => sample_size::run(a, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(EnvFilter::try_from_env("SAEREG_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let stage = cli.command.stage();
    match run(cli) {
        Ok(result) => {
            println!("{result}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {stage} failed: {e:#}");
            ExitCode::FAILURE
        }
    }
}

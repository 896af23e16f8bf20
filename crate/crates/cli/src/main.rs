//! `chn`: train, generate, evaluate, gradcheck and stats.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chn", version, about = "Distractor generation with a co-attention hierarchical network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on `<data-dir>/train.jsonl`, validating on `dev.jsonl`.
    Train(TrainArgs),
    /// Generate three distractors per sample of a split.
    Generate(GenerateArgs),
    /// Score generated distractors with BLEU and ROUGE.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient check of every model block on a toy config.
    Gradcheck(GradcheckArgs),
    /// Dataset statistics of a split.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Co-attention off, SSL off.
    Hred,
    /// Co-attention on, SSL off.
    Coattn,
    /// Co-attention off, SSL on.
    Ssl,
    /// Co-attention on, SSL on.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML training configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Output directory for checkpoints, vocabulary, log and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preset: Option<Preset>,
    /// Weight of the semantic-similarity term.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// GloVe-style text file for initialising word embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Checkpoint inside a directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    beam_size: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    jaccard_threshold: f64,
    /// Rank beams by total rather than per-token log-probability.
    #[arg(long)]
    no_length_norm: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// JSONL written by `generate`.
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Score slot i against gold distractor i only.
    #[arg(long)]
    strict: bool,
    /// Write the report as JSON here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = chn::gradients::DEFAULT_EPS)]
    eps: f64,
    /// Check only this block; repeatable.
    #[arg(long = "block")]
    blocks: Vec<String>,
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! `eslong` command-line driver: pre-training, context extension,
//! quantization, embedding extraction, head training, prediction and
//! Fmax evaluation.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "eslong", version, about = "Long-context protein language-model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-LM pre-training (full or LoRA, optionally over an int4 base).
    Pretrain(PretrainArgs),
    /// Grow a checkpoint's position table.
    Extend(ExtendArgs),
    /// Compress projection weights to int4 blocks.
    Quantize(QuantizeArgs),
    /// Per-protein embeddings from a FASTA file.
    Embed(EmbedArgs),
    /// Train the function-prediction head on embeddings.
    TrainHead(TrainHeadArgs),
    /// Score every protein in an embedding store with a trained head.
    Predict(PredictArgs),
    /// Fmax of predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct PretrainArgs {
    /// JSON config with `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train rank-r adapters instead of the full model.
    #[arg(long)]
    pub lora_rank: Option<usize>,
    /// Adapter scale numerator (defaults to the rank).
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    /// Quantize the base weights to int4 before attaching adapters.
    #[arg(long)]
    pub quantize_base: bool,
    #[arg(long, default_value_t = 64)]
    pub block_size: usize,
    /// Fold trained adapters into the base weights before saving.
    #[arg(long)]
    pub merge: bool,
}

#[derive(Args)]
pub struct ExtendArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2050)]
    pub capacity: usize,
    #[arg(long, default_value = "copy")]
    pub strategy: String,
    /// Switch to local attention with this window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct QuantizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub block_size: usize,
    /// Also quantize the masked-LM output projection.
    #[arg(long)]
    pub include_lm_head: bool,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fasta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Residues per slice (defaults to the model's capacity).
    #[arg(long)]
    pub residue_limit: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// `mean` over residues or the `cls` state.
    #[arg(long, default_value = "mean")]
    pub pooling: String,
    /// Also write a TSV export.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainHeadArgs {
    /// JSON config with a `head` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Annotation TSV covering training and validation proteins.
    #[arg(long)]
    pub truth: PathBuf,
    /// Close the truth under this ontology first.
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(long, default_value = "MFO")]
    pub namespace: String,
    /// One term per line; defaults to the terms seen in training truth.
    #[arg(long)]
    pub terms: Option<PathBuf>,
    /// Keep only the most frequent training terms.
    #[arg(long)]
    pub max_terms: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub ontology: Option<PathBuf>,
    #[arg(long, default_value = "MFO")]
    pub namespace: String,
    /// Max-propagate scores up the ontology.
    #[arg(long)]
    pub close_scores: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub ontology: PathBuf,
    #[arg(long)]
    pub namespace: String,
    /// Only score proteins longer than this (needs --fasta for lengths).
    #[arg(long)]
    pub min_length: Option<usize>,
    #[arg(long)]
    pub fasta: Option<PathBuf>,
    #[arg(long)]
    pub close_scores: bool,
    #[arg(long)]
    pub exclude_roots: bool,
    /// Restrict scoring to the terms listed in this file.
    #[arg(long)]
    pub terms: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional TSV export of the threshold curve.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ESLONG_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Extend(a) => commands::extend(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Embed(a) => commands::embed(a),
        Command::TrainHead(a) => commands::train_head(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(commands::Outcome::Complete) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Partial(n)) => {
            eprintln!("warning: {n} record(s) skipped; see the manifest for details");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Unified generative sentiment analysis at desk scale.
///
/// Log verbosity is read from `SENTIO_LOG` (e.g. `SENTIO_LOG=info`).
#[derive(Debug, Parser)]
#[command(name = "sentio", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate corpora against a registry; prints per-file record counts.
    Validate(Common),
    /// Write a deterministic synthetic corpus covering all four tasks.
    Synth(SynthArgs),
    /// Pre-training stage one: masked context, polarity and contrastive losses.
    Pretrain1(TrainArgs),
    /// Pre-training stage two: masked context and cross-task pseudo labels.
    Pretrain2(TrainArgs),
    /// Joint fine-tuning on the generation loss.
    Finetune(TrainArgs),
    /// Greedy-decode every record and score each dataset.
    Eval(Common),
    /// Dump pooled encoder representations as JSON Lines.
    ExportEmbeddings(Common),
    /// Annotation and subjective bias from embeddings, a matrix file or the bundled fixture.
    BiasReport(BiasArgs),
}

/// Flags shared by every data-driven command. Flags override the config file.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// TOML file with `[train]` and `[model]` tables plus optional paths.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus file (JSON Lines); repeatable.
    #[arg(long)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Per-epoch validation corpus for fine-tuning; repeatable.
    #[arg(long)]
    pub validation: Vec<PathBuf>,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long)]
    pub halt_at: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Records per task.
    #[arg(long, default_value_t = 4)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Embedding dump from `export-embeddings`.
    #[arg(long, conflicts_with = "matrix")]
    pub embeddings: Option<PathBuf>,
    /// Accuracy matrix JSON (`{"datasets": [...], "acc": [[...]]}`).
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    /// Label correspondence JSON (`{"dataset": {"label": "canonical"}}`).
    #[arg(long, requires = "embeddings")]
    pub correspondence: Option<PathBuf>,
    /// Dataset order for an embedding dump; defaults to first appearance.
    #[arg(long, value_delimiter = ',')]
    pub datasets: Vec<String>,
}

//! `whyprompt` command-line pipeline: build a rationale dataset, train why
//! prompts, evaluate doubly right recognition and render reports.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "whyprompt", version, about = "Doubly right object recognition toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query rationales and images, then write a split JSONL manifest.
    BuildDataset(BuildDatasetArgs),
    /// Learn why prompts on a manifest's train split.
    Train(TrainArgs),
    /// Score doubly right recognition on a manifest.
    Eval(EvalArgs),
    /// Evaluate trained prompts across datasets they were not trained on.
    Transfer(TransferArgs),
    /// Merge and re-render existing CSV reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RationaleSourceKind {
    Mock,
    OpenaiCompatible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageSourceKind {
    Mock,
    Dir,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatChoice {
    Csv,
    Md,
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// One category per line; `#` comments and blank lines are ignored.
    #[arg(long)]
    pub categories: PathBuf,
    #[arg(long, value_enum)]
    pub rationale_source: RationaleSourceKind,
    #[arg(long, value_enum)]
    pub image_source: ImageSourceKind,
    /// Manifest path; images are stored in `images/` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object of canned completions for the mock rationale source.
    #[arg(long)]
    pub rationale_fixture: Option<PathBuf>,
    /// Rationales the mock source invents for subjects not in the fixture.
    #[arg(long, default_value_t = 3)]
    pub mock_rationales: usize,
    /// Chat-completions API root for the openai-compatible source.
    #[arg(long, default_value = "https://api.openai.com/v1")]
    pub llm_url: String,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    pub llm_model: String,
    /// Root of `<category>/<rationale>/` folders for the dir image source.
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Search URL with `{query}` (and optionally `{limit}`) for the http source.
    #[arg(long)]
    pub image_url: Option<String>,
    /// Images kept per query.
    #[arg(long, default_value_t = 50)]
    pub limit: usize,
    /// Images the mock source returns per query.
    #[arg(long, default_value_t = 4)]
    pub mock_images: usize,
    /// Side length of mock images.
    #[arg(long, default_value_t = 32)]
    pub mock_size: usize,
    /// Collect images per (category, rationale, sub-rationale).
    #[arg(long)]
    pub hierarchical: bool,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// `key = value` run configuration (backend, prompt.*, train.*, seed).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Images are resized to this square size before encoding.
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `imagenet+` (deep, k=30, lr 10, 10 epochs) or `small` (input, k=3, lr 40, 100 epochs).
    #[arg(long)]
    pub preset: Option<String>,
    /// Loss curve CSV; defaults to the prompt path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalOptions {
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value = "cross_product")]
    pub bank: String,
    /// Judge (category, rationale, sub-rationale) triples.
    #[arg(long)]
    pub hierarchical: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Output format; inferred from the report extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatChoice>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prompt checkpoint; the bare backbone is evaluated without it.
    #[arg(long)]
    pub prompt: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Add one row per category.
    #[arg(long)]
    pub per_category: bool,
    #[command(flatten)]
    pub options: EvalOptions,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// NAME=PROMPT.whyp pairs.
    #[arg(long, num_args = 1.., required = true)]
    pub train: Vec<String>,
    /// NAME=MANIFEST.jsonl pairs.
    #[arg(long, num_args = 1.., required = true)]
    pub eval: Vec<String>,
    #[arg(long)]
    pub report: PathBuf,
    #[command(flatten)]
    pub options: EvalOptions,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// CSV reports written by `eval`.
    #[arg(long = "input", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    pub format: FormatChoice,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Report(a) => commands::report(&a),
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "prefkit", version, about = "Train, evaluate and collect human-preference reward models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 runs sequentially. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pick a diverse prompt subset from text embeddings.
    SelectPrompts(SelectArgs),
    /// Turn the rankings of a dataset into comparison pairs.
    ExtractPairs(DataArgs),
    /// Train a reward head; comma lists for --lr/--batch run a grid search.
    Train(TrainArgs),
    /// Preference accuracy and recall/filter@1/2/4 for each scorer.
    Eval(EvalArgs),
    /// Pairwise and leave-one-out ensemble agreement between annotators.
    Agreement(AgreementArgs),
    /// How often scorer A's top picks beat scorer B's.
    Winrate(WinrateArgs),
    /// Evaluate mixtures of two standardized scorers.
    Interpolate(InterpolateArgs),
    /// Spearman correlation of metric model rankings with human rankings.
    RankModels(RankModelsArgs),
    /// Category, problem and function-phrase summaries as TSV.
    Analyze(DataArgs),
    /// Best-of-N selection among candidate images.
    Rerank(RerankArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Neighbors per vertex in the similarity graph.
    #[arg(long, default_value_t = 150)]
    pub k: usize,
    /// Prompts to select (whole store, no chunking).
    #[arg(long, default_value_t = 100, conflicts_with = "set_size")]
    pub count: usize,
    /// Split the store into sets of this size and select from each.
    #[arg(long)]
    pub set_size: Option<usize>,
    /// Prompts taken from every set.
    #[arg(long, default_value_t = 100, requires = "set_size")]
    pub per_set: usize,
    /// Weight multiplier for neighbors of a selected prompt.
    #[arg(long, default_value_t = prefkit_core::select::DEFAULT_DECAY)]
    pub decay: f64,
}

/// Where scores come from: a trained head, a score file, or both.
#[derive(Debug, Args)]
pub struct ScorerArgs {
    #[arg(long, requires = "model")]
    pub embeddings: Option<PathBuf>,
    /// Reward head file; scored under the name `model`.
    #[arg(long, requires = "embeddings")]
    pub model: Option<PathBuf>,
    /// Score file with `{prompt_id, image_id, scorer, score}` lines.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Where to write the trained head.
    #[arg(long)]
    pub model: PathBuf,
    /// Base learning rate, or a comma list.
    #[arg(long, value_delimiter = ',', default_value = "0.00001")]
    pub lr: Vec<f64>,
    /// Batch size, or a comma list.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    pub batch: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Share of layers, input side first, kept fixed.
    #[arg(long, default_value_t = 0.7)]
    pub frozen_fraction: f64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "2048")]
    pub hidden: Vec<usize>,
    /// Share of ranked prompts held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Per-step training log (line-delimited JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub scorers: ScorerArgs,
}

#[derive(Debug, Args)]
pub struct AgreementArgs {
    /// Derive labels from the rankings of this dataset.
    #[arg(long, required_unless_present = "labels")]
    pub data: Option<PathBuf>,
    /// Label file with `{annotator, prompt_id, first_id, second_id, verdict}` lines.
    #[arg(long, conflicts_with = "data")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WinrateArgs {
    /// Dataset whose rankings serve as the reference.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub scorers: ScorerArgs,
    /// Scorer A: `model`, `random`, or a name from the score file.
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    #[arg(long, default_value_t = 3)]
    pub top_n: usize,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub scorers: ScorerArgs,
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    /// Weights on scorer A.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct RankModelsArgs {
    /// JSON document with `human`, `metrics` and optional `scores`.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub scorers: ScorerArgs,
    /// Scorer name when several are available.
    #[arg(long, default_value = "model")]
    pub scorer: String,
    /// Dataset used to look up candidates and embedding ids.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    /// Candidate image ids; defaults to every generation of the prompt.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub top_n: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service directory with seeds and the annotation log.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub serve_addr: String,
    #[arg(long, default_value_t = prefkit_service::DEFAULT_QUALIFICATION_THRESHOLD)]
    pub qualification_threshold: f64,
    #[arg(long, default_value_t = prefkit_service::DEFAULT_SKIP_CAP)]
    pub skip_cap: usize,
    #[arg(long)]
    pub image_url_prefix: Option<String>,
}

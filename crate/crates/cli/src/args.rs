use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tod", version, about = "Prompted task-oriented dialogue: ingest, run, evaluate, serve")]
pub struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a raw MultiWOZ 2.2 or SGD directory into a corpus cache.
    Ingest(IngestArgs),
    /// Sample and embed the few-shot example pool.
    BuildStore(BuildStoreArgs),
    /// Run one pipeline variant over a corpus split.
    Run(RunArgs),
    /// Run a few-shot variant once per pool size and evaluate each point.
    Sweep(SweepArgs),
    /// Score a prediction file against the corpus.
    Evaluate(EvaluateArgs),
    /// Start the chat and annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dataset {
    Multiwoz,
    Sgd,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub dataset: Dataset,
    /// Raw dataset directory.
    pub path: PathBuf,
    /// Output directory for the corpus cache.
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum EmbedderKind {
    /// Hashed character trigrams; no network.
    #[default]
    Hashing,
    /// Remote embedding endpoint.
    Http,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedderArgs {
    #[arg(long, value_enum, default_value_t = EmbedderKind::Hashing)]
    pub embedder: EmbedderKind,
    #[arg(long)]
    pub embed_url: Option<String>,
    #[arg(long, default_value = "")]
    pub embed_model: String,
    #[arg(long, default_value_t = 512)]
    pub embed_dim: usize,
    /// Environment variable holding the embedding API key.
    #[arg(long)]
    pub embed_api_key_env: Option<String>,
}

#[derive(Debug, Args)]
pub struct BuildStoreArgs {
    /// Corpus cache or raw dataset directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    /// Store file (JSONL).
    #[arg(long)]
    pub out: PathBuf,
}

/// Pipeline configuration: flags override the config file, which overrides
/// the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// TOML file with `PipelineConfig` field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub few_shot: bool,
    #[arg(long)]
    pub oracle_state: bool,
    #[arg(long)]
    pub oracle_domain: bool,
    /// Examples sampled per domain for the context store.
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Retrieved examples per prompt.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fuzzy_threshold: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Answer from a cassette.
    Replay,
    /// Call a remote completion endpoint.
    Http,
    /// Call a remote endpoint and append every exchange to the cassette.
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Wire {
    #[default]
    Completion,
    Chat,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Replay)]
    pub backend: BackendKind,
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// Fall back to an empty completion on a cassette miss instead of failing.
    #[arg(long)]
    pub lenient_replay: bool,
    /// Base URL of the completion endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Request path on the endpoint; defaults to the wire style's usual path.
    #[arg(long)]
    pub endpoint_path: Option<String>,
    #[arg(long, value_enum, default_value_t = Wire::Completion)]
    pub wire: Wire,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Concurrent requests allowed against the endpoint.
    #[arg(long, default_value_t = 4)]
    pub max_concurrency: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusRunArgs {
    /// Corpus cache or raw dataset directory.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split to run: train, dev, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Split the few-shot pool is drawn from.
    #[arg(long, default_value = "train")]
    pub pool_split: String,
    /// Prebuilt store; built from the pool split when absent.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Template directory; the built-in set for the corpus otherwise.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Only these dialogue ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub dialogues: Vec<String>,
    /// Only the first N dialogues of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Dialogue-level workers; defaults to the core count, capped by
    /// `--max-concurrency` for remote backends.
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub run: CorpusRunArgs,
    /// Output directory for predictions, transcripts and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: CorpusRunArgs,
    /// Pool sizes to run (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub pool_sizes: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = tod_core::fuzzy::DEFAULT_THRESHOLD)]
    pub fuzzy_threshold: f64,
    /// Ignore extra predicted slots in joint goal accuracy.
    #[arg(long)]
    pub lenient_jga: bool,
    /// Add a per-domain table.
    #[arg(long)]
    pub per_domain: bool,
    /// Row label in the printed table.
    #[arg(long, default_value = "predictions")]
    pub label: String,
    /// Write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected report; any metric off by more than `--tolerance` exits 1.
    #[arg(long)]
    pub expect: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Busy {
    #[default]
    Reject,
    Queue,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Corpus whose goals are offered to annotators.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Append-only session log.
    #[arg(long)]
    pub data_file: Option<PathBuf>,
    /// Built UI bundle.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; repeat for several. Any origin when absent.
    #[arg(long)]
    pub cors_origin: Vec<String>,
    /// Text file with annotator instructions.
    #[arg(long)]
    pub instructions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Busy::Reject)]
    pub busy: Busy,
    #[arg(long, default_value = "train")]
    pub pool_split: String,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

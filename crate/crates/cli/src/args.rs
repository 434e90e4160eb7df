use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matchforge::config::BackendKind;
use matchforge::eval::DeferralPolicy;
use matchforge::Ablation;

/// Schema matching with retrieval, LLM reasoning and self-bootstrapped demonstrations.
#[derive(Debug, Parser)]
#[command(name = "matchforge", version)]
pub struct Cli {
    /// Engine config file (TOML). Falls back to MATCHFORGE_CONFIG, then defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `matchforge=debug`.
    #[arg(long, global = true, default_value = "warn", value_name = "FILTER")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a target schema into a multi-vector index file.
    Index(IndexArgs),
    /// Match every source attribute and write the MatchRun JSON.
    Match(MatchArgs),
    /// Bootstrap demonstrations from evaluator-rated traces.
    Optimize(OptimizeArgs),
    /// Score a MatchRun against gold: accuracy@k, deferral and remedial curves.
    Evaluate(EvaluateArgs),
    /// Run every ablation variant and print one metrics row per variant.
    Ablation(AblationArgs),
    /// Serve the run store HTTP API and the review UI.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbedderArg {
    Hash,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Replay,
    Record,
    Live,
    Scripted,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Replay => BackendKind::Replay,
            BackendArg::Record => BackendKind::Record,
            BackendArg::Live => BackendKind::Live,
            BackendArg::Scripted => BackendKind::Scripted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    Full,
    ReasoningOnly,
    SemanticOnly,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::ReasoningOnly => Ablation::ReasoningOnly,
            AblationArg::SemanticOnly => Ablation::SemanticOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Entropy,
    Random,
}

impl From<PolicyArg> for DeferralPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Entropy => DeferralPolicy::Entropy,
            PolicyArg::Random => DeferralPolicy::Random,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EmbedderFlags {
    /// Embedder kind.
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderArg>,
    /// Hash embedder seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Remote embedder base URL (serves `POST /embed`).
    #[arg(long, value_name = "URL")]
    pub embedder_url: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendFlags {
    /// LLM backend.
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Cassette to replay from, or to record into.
    #[arg(long, value_name = "PATH")]
    pub cassette: Option<PathBuf>,
    /// Rules file for the scripted backend.
    #[arg(long, value_name = "PATH")]
    pub script: Option<PathBuf>,
    /// Live endpoint base URL (also MATCHFORGE_LLM_URL).
    #[arg(long, value_name = "URL")]
    pub llm_url: Option<String>,
    /// Model tag sent to the live endpoint.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Target schema JSON.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
    /// Output index file.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    /// Source schema JSON.
    #[arg(long, value_name = "PATH")]
    pub source: PathBuf,
    /// Target schema JSON.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,
    /// Prebuilt index; built in memory when omitted.
    #[arg(long, value_name = "PATH")]
    pub index: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
    /// DemoSet files to attach (repeatable).
    #[arg(long, value_name = "PATH", num_args = 1..)]
    pub demos: Vec<PathBuf>,
    /// Pipeline variant.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    /// Semantic candidates per query.
    #[arg(long)]
    pub k_semantic: Option<usize>,
    /// Reasoning candidates per query.
    #[arg(long)]
    pub k_reason: Option<usize>,
    /// Drop ranked candidates scoring below this.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Queries processed concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Format the MCQ with an LLM call instead of locally.
    #[arg(long)]
    pub mcq_via_llm: bool,
    /// Output MatchRun JSON.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Source schema JSON.
    #[arg(long, value_name = "PATH")]
    pub source: PathBuf,
    /// Target schema JSON.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,
    /// Prebuilt index; built in memory when omitted.
    #[arg(long, value_name = "PATH")]
    pub index: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
    /// Easy queries in the eval set.
    #[arg(long)]
    pub n_easy: Option<usize>,
    /// Challenging queries in the eval set.
    #[arg(long)]
    pub n_challenging: Option<usize>,
    /// Demonstrations kept per stage.
    #[arg(long)]
    pub n_demos: Option<usize>,
    /// Lowest evaluator rating a trace needs to be selected.
    #[arg(long)]
    pub min_rating: Option<u8>,
    /// Directory for the per-stage DemoSet files.
    #[arg(long, value_name = "DIR")]
    pub out_demos: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// MatchRun JSON written by `match`.
    #[arg(long, value_name = "PATH")]
    pub run: PathBuf,
    /// Gold mapping CSV (`source,target`, empty target for no match).
    #[arg(long, value_name = "PATH")]
    pub gold: PathBuf,
    /// Source schema the gold refers to.
    #[arg(long, value_name = "PATH")]
    pub source: PathBuf,
    /// Target schema the gold refers to.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,
    /// Cutoffs for accuracy@k.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5])]
    pub k: Vec<usize>,
    /// Write the deferral curve as CSV, one row per p in {0,10,..,50}.
    #[arg(long, value_name = "PATH")]
    pub deferral: Option<PathBuf>,
    /// Which queries the CSV curve defers first.
    #[arg(long, value_enum, default_value = "entropy")]
    pub deferral_policy: PolicyArg,
    /// Seed for the random deferral policy.
    #[arg(long, default_value_t = 0)]
    pub deferral_seed: u64,
    /// Write the remedial-action curve as CSV.
    #[arg(long, value_name = "PATH")]
    pub remedial: Option<PathBuf>,
    /// Similarity thresholds for the remedial curve.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
    pub thresholds: Vec<f64>,
    /// Interchangeable target pairs applied before scoring (CSV `a,b`).
    #[arg(long, value_name = "PATH")]
    pub equivalence: Option<PathBuf>,
    /// Write the full report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Source schema JSON.
    #[arg(long, value_name = "PATH")]
    pub source: PathBuf,
    /// Target schema JSON.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,
    /// Gold mapping CSV.
    #[arg(long, value_name = "PATH")]
    pub gold: PathBuf,
    /// Prebuilt index; built in memory when omitted.
    #[arg(long, value_name = "PATH")]
    pub index: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
    /// Directory for one MatchRun JSON per variant.
    #[arg(long, value_name = "DIR")]
    pub out_runs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Run store directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub data_dir: PathBuf,
    /// Built review UI to serve at `/`.
    #[arg(long, value_name = "DIR")]
    pub ui_dir: Option<PathBuf>,
}

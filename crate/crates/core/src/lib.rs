//! Schema matching as retrieval plus LLM reasoning.
//!
//! Source attributes are matched against a target schema by combining
//! late-interaction semantic retrieval with a staged LLM pipeline
//! (candidate generation, refinement, multiple-choice confidence scoring).

pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod index;
pub mod llm;
pub mod optimize;
pub mod pipeline;
pub mod schema;
pub mod store;

pub use config::{BackendKind, Engine, EngineConfig};
pub use embed::{Embedder, EmbedderSpec, HashEmbedder, RemoteEmbedder, TokenEmbeddings};
pub use error::{Error, LlmError, Result};
pub use eval::{DeferralCurve, DeferralPolicy, MetricReport};
pub use index::{maxsim, Document, SemanticCandidate, VectorIndex};
pub use llm::{Backend, Gateway, LlmParams, LlmRequest, Stage};
pub use optimize::{BootstrapConfig, DemoSet};
pub use pipeline::{Ablation, MatchRun, Matcher, PipelineConfig, QueryAttribute, QueryRecord, ScoredMatch};
pub use schema::{AttributeRef, MappingEntry, MappingSet, Schema};
pub use store::{Decision, HumanDecision, RunRecord, RunRequest, RunStatus, RunStore};

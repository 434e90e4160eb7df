//! Engine configuration (TOML) and the wiring that turns it into a
//! ready-to-run matcher.
//!
//! ```toml
//! k_semantic = 5
//! ablation = "full"
//! demos = ["demos/candidate_gen.json"]
//!
//! [backend]
//! kind = "replay"
//! cassette = "fixtures/mimic.cassette.jsonl"
//!
//! [embedder]
//! kind = "hash"
//! seed = 0
//! dim = 64
//! ```
//!
//! Relative paths in a config file are resolved against the file's directory.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::{self, Embedder, EmbedderSpec};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::llm::{
    cassette_id, Backend, CassetteWriter, Gateway, LiveBackend, LiveConfig, LlmParams, ReplayBackend, RetryPolicy,
    ScriptedBackend,
};
use crate::optimize::{load_demo_sets, BootstrapConfig};
use crate::pipeline::{Ablation, MatchRun, Matcher, PipelineConfig, StageDemos};
use crate::schema::Schema;

pub const CONFIG_ENV: &str = "MATCHFORGE_CONFIG";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Replay,
    Record,
    Live,
    Scripted,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replay" => Ok(BackendKind::Replay),
            "record" => Ok(BackendKind::Record),
            "live" => Ok(BackendKind::Live),
            "scripted" => Ok(BackendKind::Scripted),
            other => Err(Error::Config(format!(
                "unknown backend {other:?} (expected replay, record, live or scripted)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Replay source, or record destination.
    pub cassette: Option<PathBuf>,
    /// Rules file for the scripted backend.
    pub script: Option<PathBuf>,
    pub url: Option<String>,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_base_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            cassette: None,
            script: None,
            url: None,
            api_key: None,
            timeout_secs: 120,
            max_retries: 3,
            retry_base_ms: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub seed: u64,
    pub dim: usize,
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hash,
            seed: 0,
            dim: embed::DEFAULT_DIM,
            url: None,
            timeout_secs: 30,
            max_retries: 3,
        }
    }
}

impl EmbedderConfig {
    pub fn spec(&self) -> Result<EmbedderSpec> {
        if self.dim == 0 {
            return Err(Error::Config("embedder.dim must be at least 1".into()));
        }
        Ok(match self.kind {
            EmbedderKind::Hash => EmbedderSpec::Hash {
                seed: self.seed,
                dim: self.dim,
            },
            EmbedderKind::Remote => EmbedderSpec::Remote {
                url: self
                    .url
                    .clone()
                    .ok_or_else(|| Error::Config("embedder.url is required for the remote embedder".into()))?,
                dim: self.dim,
            },
        })
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        embed::from_spec(&self.spec()?, Duration::from_secs(self.timeout_secs), self.max_retries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k_semantic: usize,
    pub k_reason: usize,
    pub refine_limit: usize,
    pub tau: f64,
    pub parallelism: usize,
    pub ablation: Ablation,
    pub mcq_via_llm: bool,
    /// DemoSet files, at most one per stage.
    pub demos: Vec<PathBuf>,
    /// Prebuilt index; built in memory when absent.
    pub index: Option<PathBuf>,
    pub backend: BackendConfig,
    pub embedder: EmbedderConfig,
    pub llm: LlmParams,
    pub bootstrap: BootstrapConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        EngineConfig {
            k_semantic: p.k_semantic,
            k_reason: p.k_reason,
            refine_limit: p.refine_limit,
            tau: p.tau,
            parallelism: p.parallelism,
            ablation: p.ablation,
            mcq_via_llm: p.mcq_via_llm,
            demos: Vec::new(),
            index: None,
            backend: BackendConfig::default(),
            embedder: EmbedderConfig::default(),
            llm: LlmParams::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }
}

fn rebase(dir: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = dir.join(&*p);
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("config", e.message()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: EngineConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.message()))?;
        if let Some(dir) = path.parent() {
            cfg.rebase_paths(dir);
        }
        Ok(cfg)
    }

    /// Explicit path, else `MATCHFORGE_CONFIG`, else defaults.
    pub fn discover(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn rebase_paths(&mut self, dir: &Path) {
        for p in &mut self.demos {
            rebase(dir, p);
        }
        for p in [&mut self.index, &mut self.backend.cassette, &mut self.backend.script]
            .into_iter()
            .flatten()
        {
            rebase(dir, p);
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            k_semantic: self.k_semantic,
            k_reason: self.k_reason,
            refine_limit: self.refine_limit,
            tau: self.tau,
            parallelism: self.parallelism,
            ablation: self.ablation,
            mcq_via_llm: self.mcq_via_llm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.llm.validate().map_err(Error::Config)?;
        self.embedder.spec()?;
        match self.backend.kind {
            BackendKind::Replay | BackendKind::Record if self.backend.cassette.is_none() => Err(Error::Config(
                "backend.cassette is required for replay and record backends".into(),
            )),
            BackendKind::Scripted if self.backend.script.is_none() => {
                Err(Error::Config("backend.script is required for the scripted backend".into()))
            }
            _ => Ok(()),
        }
    }

    /// The gateway plus the replay cassette id, when there is one.
    pub fn build_gateway(&self) -> Result<(Gateway, Option<String>)> {
        self.validate()?;
        let b = &self.backend;
        let timeout = Duration::from_secs(b.timeout_secs);
        let live = || -> Result<LiveBackend> {
            let cfg = LiveConfig::resolve(b.url.clone(), b.api_key.clone(), timeout).map_err(Error::Config)?;
            Ok(LiveBackend::new(cfg)?)
        };
        let mut recorder = None;
        let mut id = None;
        let backend: Box<dyn Backend> = match b.kind {
            BackendKind::Replay => {
                let path = b.cassette.as_ref().expect("validated");
                id = Some(cassette_id(path)?);
                Box::new(ReplayBackend::open(path)?)
            }
            BackendKind::Record => {
                recorder = Some(CassetteWriter::open(b.cassette.as_ref().expect("validated"))?);
                Box::new(live()?)
            }
            BackendKind::Live => Box::new(live()?),
            BackendKind::Scripted => Box::new(ScriptedBackend::open(b.script.as_ref().expect("validated"))?),
        };
        let mut gateway = Gateway::new(backend)
            .with_params(self.llm.clone())
            .with_retry(RetryPolicy {
                max_retries: b.max_retries,
                base_delay: Duration::from_millis(b.retry_base_ms),
            });
        if let Some(r) = recorder {
            gateway = gateway.with_recorder(r);
        }
        Ok((gateway, id))
    }

    pub fn load_demos(&self) -> Result<StageDemos> {
        let demos = load_demo_sets(&self.demos)?;
        if demos.len() != self.demos.len() {
            return Err(Error::Config("demos lists more than one file for the same stage".into()));
        }
        Ok(demos)
    }
}

/// Everything a matcher borrows, owned in one place.
pub struct Engine {
    pub target: Schema,
    pub index: VectorIndex,
    pub embedder: Box<dyn Embedder>,
    pub gateway: Gateway,
    pub pipeline: PipelineConfig,
    pub demos: StageDemos,
    pub cassette_id: Option<String>,
}

impl Engine {
    /// Uses `index` if given, else `config.index`, else builds one.
    pub fn prepare(config: &EngineConfig, target: Schema, index: Option<VectorIndex>) -> Result<Engine> {
        config.validate()?;
        let embedder = config.embedder.build()?;
        let index = match (index, &config.index) {
            (Some(ix), _) => ix,
            (None, Some(path)) => VectorIndex::load(path)?,
            (None, None) => VectorIndex::build(&target, embedder.as_ref(), config.parallelism)?,
        };
        if *index.embedder_spec() != embedder.spec() {
            return Err(Error::Config(format!(
                "index was built with {:?} but the configured embedder is {:?}",
                index.embedder_spec(),
                embedder.spec()
            )));
        }
        let (gateway, cassette_id) = config.build_gateway()?;
        Ok(Engine {
            target,
            index,
            embedder,
            gateway,
            pipeline: config.pipeline(),
            demos: config.load_demos()?,
            cassette_id,
        })
    }

    pub fn matcher(&self) -> Result<Matcher<'_>> {
        Ok(Matcher::new(
            &self.target,
            &self.index,
            self.embedder.as_ref(),
            &self.gateway,
            self.pipeline.clone(),
        )?
        .with_demos(self.demos.clone())
        .with_cassette_id(self.cassette_id.clone()))
    }

    pub fn run(&self, source: &Schema) -> Result<MatchRun> {
        self.matcher()?.run(source)
    }
}

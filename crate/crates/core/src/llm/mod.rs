//! Chat-completion gateway.
//!
//! Every model call goes through [`Gateway`], which renders a
//! [`PromptInstance`], dispatches to a [`Backend`] (live HTTP, cassette
//! replay or scripted), retries transient failures, optionally records the
//! exchange into a cassette, and gives a parse failure exactly one repair
//! attempt.

mod cassette;
mod live;
pub mod parse;
pub mod prompt;
mod scripted;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cassette::{cassette_id, load_cassette, CassetteRecord, CassetteWriter, ReplayBackend};
pub use live::{LiveBackend, LiveConfig};
pub use prompt::{live_field, live_section, Demo, PromptInstance};
pub use scripted::{ScriptRule, ScriptedBackend};

use crate::error::LlmError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CandidateGen,
    Refine,
    McqFormat,
    Confidence,
    Evaluator,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::CandidateGen,
        Stage::Refine,
        Stage::McqFormat,
        Stage::Confidence,
        Stage::Evaluator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::CandidateGen => "candidate_gen",
            Stage::Refine => "refine",
            Stage::McqFormat => "mcq_format",
            Stage::Confidence => "confidence",
            Stage::Evaluator => "evaluator",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub n: u32,
    pub model_tag: String,
}

impl Default for LlmParams {
    fn default() -> Self {
        LlmParams {
            temperature: 0.5,
            max_tokens: 1024,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            n: 1,
            model_tag: "gpt-4-1106-preview".to_string(),
        }
    }
}

impl LlmParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        if self.max_tokens == 0 || self.n == 0 {
            return Err("max_tokens and n must be positive".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err("top_p must be in (0, 1]".into());
        }
        Ok(())
    }
}

/// What a backend is asked to complete. Its canonical JSON form is hashed
/// into the cassette key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub stage: Stage,
    pub prompt: String,
    pub params: LlmParams,
}

impl LlmRequest {
    /// Lowercase hex SHA-256 of the canonical serialization.
    pub fn key(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;

    fn name(&self) -> &'static str;

    /// Replay and scripted backends return fixed text for a given request.
    fn is_deterministic(&self) -> bool;
}

#[derive(Clone, Debug)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// A parsed completion along with the raw text that produced it.
#[derive(Clone, Debug)]
pub struct Parsed<T> {
    pub value: T,
    pub raw: String,
    pub repaired: bool,
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    params: LlmParams,
    retry: RetryPolicy,
    recorder: Option<CassetteWriter>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Gateway {
            backend,
            params: LlmParams::default(),
            retry: RetryPolicy::default(),
            recorder: None,
        }
    }

    pub fn with_params(mut self, params: LlmParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_recorder(mut self, recorder: CassetteWriter) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn params(&self) -> &LlmParams {
        &self.params
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    pub fn is_deterministic(&self) -> bool {
        self.backend.is_deterministic()
    }

    pub fn request_for(&self, prompt: &PromptInstance) -> LlmRequest {
        LlmRequest {
            stage: prompt.stage,
            prompt: prompt.render(),
            params: self.params.clone(),
        }
    }

    pub fn complete(&self, prompt: &PromptInstance) -> Result<String, LlmError> {
        self.send(&self.request_for(prompt))
    }

    fn send(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let mut attempt = 0;
        loop {
            match self.backend.complete(request) {
                Ok(text) => {
                    if let Some(rec) = &self.recorder {
                        if let Err(e) = rec.append(request, &text) {
                            tracing::warn!(error = %e, "failed to append cassette record");
                        }
                    }
                    return Ok(text);
                }
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt);
                    attempt += 1;
                    tracing::warn!(stage = %request.stage, attempt, error = %e, "retrying LLM call");
                    std::thread::sleep(delay);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Completes and parses; on a parse failure re-prompts once with a
    /// format reminder appended to the instruction.
    pub fn complete_parsed<T>(
        &self,
        prompt: &PromptInstance,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Parsed<T>, LlmError> {
        let raw = self.complete(prompt)?;
        match parse(&raw) {
            Ok(value) => Ok(Parsed {
                value,
                raw,
                repaired: false,
            }),
            Err(first) => {
                tracing::warn!(stage = %prompt.stage, error = %first, "unparseable output, re-prompting once");
                let repair = prompt.with_format_reminder();
                let raw = self.complete(&repair)?;
                parse(&raw)
                    .map(|value| Parsed {
                        value,
                        raw,
                        repaired: true,
                    })
                    .map_err(|message| LlmError::Parse {
                        stage: prompt.stage,
                        message,
                    })
            }
        }
    }
}

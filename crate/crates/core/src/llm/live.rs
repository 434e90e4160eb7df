use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{Backend, LlmRequest};
use crate::error::LlmError;

pub const URL_ENV: &str = "MATCHFORGE_LLM_URL";
pub const KEY_ENV: &str = "MATCHFORGE_LLM_KEY";

#[derive(Clone, Debug)]
pub struct LiveConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl LiveConfig {
    /// Reads `MATCHFORGE_LLM_URL` / `MATCHFORGE_LLM_KEY`, letting explicit
    /// values win.
    pub fn resolve(url: Option<String>, key: Option<String>, timeout: Duration) -> Result<Self, String> {
        let base_url = url
            .or_else(|| std::env::var(URL_ENV).ok())
            .ok_or_else(|| format!("no LLM endpoint configured (set {URL_ENV} or backend.url)"))?;
        Ok(LiveConfig {
            base_url,
            api_key: key.or_else(|| std::env::var(KEY_ENV).ok()),
            timeout,
        })
    }
}

/// OpenAI-compatible chat-completions client.
pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(LiveBackend { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl Backend for LiveBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let p = &request.params;
        let body = json!({
            "model": p.model_tag,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": p.temperature,
            "max_tokens": p.max_tokens,
            "top_p": p.top_p,
            "frequency_penalty": p.frequency_penalty,
            "presence_penalty": p.presence_penalty,
            "n": p.n,
        });
        let mut req = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited(resp.text().unwrap_or_default()));
        }
        if status.is_server_error() {
            return Err(LlmError::Transport(format!("server error {status}")));
        }
        if !status.is_success() {
            return Err(LlmError::Http {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("response has no message content".into()))
    }

    fn name(&self) -> &'static str {
        "live"
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompt::live_section;
use super::{Backend, LlmRequest, Stage};
use crate::error::{Error, LlmError, Result};

/// A fixture response. `stage: None` matches any stage; `contains` is
/// matched against the live input section only, never the demos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub contains: Option<String>,
    pub response: String,
}

#[derive(Deserialize)]
struct ScriptFile {
    rules: Vec<ScriptRule>,
}

type Responder = dyn Fn(&LlmRequest) -> Option<String> + Send + Sync;

/// Returns fixture responses: first matching rule wins, then the optional
/// responder closure.
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    responder: Option<Box<Responder>>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedBackend {
            rules,
            responder: None,
        }
    }

    pub fn from_fn(f: impl Fn(&LlmRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            rules: Vec::new(),
            responder: Some(Box::new(f)),
        }
    }

    pub fn with_fallback(mut self, f: impl Fn(&LlmRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    /// Loads `{"rules": [{"stage", "contains", "response"}]}`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ScriptFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(ScriptedBackend::new(file.rules))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let live = live_section(&request.prompt);
        let hit = self.rules.iter().find(|r| {
            r.stage.is_none_or(|s| s == request.stage)
                && r.contains.as_deref().is_none_or(|c| live.contains(c))
        });
        if let Some(rule) = hit {
            return Ok(rule.response.clone());
        }
        self.responder
            .as_ref()
            .and_then(|f| f(request))
            .ok_or(LlmError::ScriptMiss {
                stage: request.stage,
            })
    }

    fn name(&self) -> &'static str {
        "scripted"
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Gateway, PromptInstance};

    #[test]
    fn rules_match_stage_and_live_text() {
        let backend = ScriptedBackend::new(vec![
            ScriptRule {
                stage: Some(Stage::Evaluator),
                contains: Some("chartdate".into()),
                response: "Rating: 4".into(),
            },
            ScriptRule {
                stage: Some(Stage::Evaluator),
                contains: None,
                response: "Rating: 0".into(),
            },
        ]);
        let gw = Gateway::new(Box::new(backend));
        assert_eq!(gw.complete(&PromptInstance::evaluator("noteevents-chartdate", "[]", &[])).unwrap(), "Rating: 4");
        assert_eq!(gw.complete(&PromptInstance::evaluator("cptevents-subsectionheader", "[]", &[])).unwrap(), "Rating: 0");
        assert!(matches!(
            gw.complete(&PromptInstance::confidence("(A)No Match", "q", &[])),
            Err(LlmError::ScriptMiss { stage: Stage::Confidence })
        ));
    }

    #[test]
    fn demo_text_does_not_trigger_rules() {
        let demo = crate::llm::Demo {
            input: [("Query".to_string(), "chartdate".to_string())].into(),
            output: [("Rating".to_string(), "5".to_string())].into(),
        };
        let backend = ScriptedBackend::new(vec![ScriptRule {
            stage: None,
            contains: Some("chartdate".into()),
            response: "Rating: 4".into(),
        }]);
        let gw = Gateway::new(Box::new(backend));
        assert!(gw.complete(&PromptInstance::evaluator("other", "[]", &[demo])).is_err());
    }

    #[test]
    fn script_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        std::fs::write(&path, r#"{"rules":[{"stage":"confidence","response":"{\"A\": 100}"}]}"#).unwrap();
        let gw = Gateway::new(Box::new(ScriptedBackend::open(&path).unwrap()));
        assert_eq!(gw.complete(&PromptInstance::confidence("(A)No Match", "q", &[])).unwrap(), "{\"A\": 100}");
    }
}

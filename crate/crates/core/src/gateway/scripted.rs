use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest, Completion};

/// One scripted reply. A rule matches when every `system_contains` needle
/// occurs in the system prompt and every `user_contains` needle occurs in the
/// user prompt. Rules are tried in order; the first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub system_contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub user_contains: Vec<String>,
    pub response: String,
}

impl ScriptRule {
    pub fn new(response: impl Into<String>) -> Self {
        ScriptRule {
            system_contains: Vec::new(),
            user_contains: Vec::new(),
            response: response.into(),
        }
    }

    pub fn system(mut self, needle: impl Into<String>) -> Self {
        self.system_contains.push(needle.into());
        self
    }

    pub fn user(mut self, needle: impl Into<String>) -> Self {
        self.user_contains.push(needle.into());
        self
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        self.system_contains
            .iter()
            .all(|n| req.system_prompt.contains(n.as_str()))
            && self
                .user_contains
                .iter()
                .all(|n| req.user_prompt.contains(n.as_str()))
    }
}

/// Serialized script: `{"format": "trialmatch-script", "version": 1, "rules": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    pub format: String,
    pub version: u32,
    pub rules: Vec<ScriptRule>,
}

pub const SCRIPT_FORMAT: &str = "trialmatch-script";

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a trialmatch script (format `{format}`, version {version})")]
    Format { format: String, version: u32 },
    #[error("reading script: {0}")]
    Io(#[from] std::io::Error),
}

/// Offline backend that answers from an ordered rule list. Reports no usage,
/// so the gateway meters it with the configured tokenizer.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedBackend { rules }
    }

    pub fn push(&mut self, rule: ScriptRule) {
        self.rules.push(rule);
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    pub fn to_file(&self) -> ScriptFile {
        ScriptFile {
            format: SCRIPT_FORMAT.into(),
            version: 1,
            rules: self.rules.clone(),
        }
    }

    pub fn parse(json: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = serde_json::from_str(json)?;
        if file.format != SCRIPT_FORMAT || file.version != 1 {
            return Err(ScriptError::Format {
                format: file.format,
                version: file.version,
            });
        }
        Ok(ScriptedBackend::new(file.rules))
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        self.rules
            .iter()
            .find(|r| r.matches(request))
            .map(|r| Completion {
                text: r.response.clone(),
                usage: None,
            })
            .ok_or(BackendError::NoScriptMatch)
    }
}

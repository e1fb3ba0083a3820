use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, Completion, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderSchema {
    /// `POST /chat/completions` with `messages` and `choices[0].message.content`.
    #[default]
    OpenAi,
    /// `POST /messages` with a top-level `system` and `content[0].text`.
    Anthropic,
}

/// Connection settings for a live provider. The API key is read from the
/// environment variable named by `api_key_env` so it never lands in config files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    #[serde(default)]
    pub schema: ProviderSchema,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "TRIALMATCH_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    config: ProviderConfig,
    api_key: Option<String>,
    id: String,
}

impl HttpChatBackend {
    pub fn new(config: ProviderConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok();
        let id = format!("http:{}", config.endpoint);
        HttpChatBackend {
            config,
            api_key,
            id,
        }
    }

    fn body(&self, req: &ChatRequest) -> Value {
        match self.config.schema {
            ProviderSchema::OpenAi => json!({
                "model": req.model_id,
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
                "messages": [
                    {"role": "system", "content": req.system_prompt},
                    {"role": "user", "content": req.user_prompt},
                ],
            }),
            ProviderSchema::Anthropic => json!({
                "model": req.model_id,
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
                "system": req.system_prompt,
                "messages": [{"role": "user", "content": req.user_prompt}],
            }),
        }
    }
}

pub(crate) fn parse_completion(schema: ProviderSchema, body: &Value) -> Result<Completion, BackendError> {
    let (text, usage) = match schema {
        ProviderSchema::OpenAi => (
            body.pointer("/choices/0/message/content"),
            body.get("usage").and_then(|u| {
                Some(Usage {
                    prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                    completion_tokens: u.get("completion_tokens")?.as_u64()?,
                })
            }),
        ),
        ProviderSchema::Anthropic => (
            body.pointer("/content/0/text"),
            body.get("usage").and_then(|u| {
                Some(Usage {
                    prompt_tokens: u.get("input_tokens")?.as_u64()?,
                    completion_tokens: u.get("output_tokens")?.as_u64()?,
                })
            }),
        ),
    };
    let text = text
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Content("response has no completion text".into()))?;
    Ok(Completion {
        text: text.to_string(),
        usage,
    })
}

impl ChatBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let mut req = agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = match self.config.schema {
                ProviderSchema::OpenAi => req.header("Authorization", &format!("Bearer {key}")),
                ProviderSchema::Anthropic => req
                    .header("x-api-key", key)
                    .header("anthropic-version", "2023-06-01"),
            };
        }
        let mut resp = req
            .send_json(self.body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Http { status, body });
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        parse_completion(self.config.schema, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_response_shapes() {
        let openai = json!({
            "choices": [{"message": {"content": "Determination: Met"}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 3}
        });
        let c = parse_completion(ProviderSchema::OpenAi, &openai).unwrap();
        assert_eq!(c.text, "Determination: Met");
        assert_eq!(c.usage.unwrap().prompt_tokens, 10);

        let anthropic = json!({"content": [{"type": "text", "text": "x"}]});
        let c = parse_completion(ProviderSchema::Anthropic, &anthropic).unwrap();
        assert_eq!(c.usage, None);

        assert!(matches!(
            parse_completion(ProviderSchema::OpenAi, &json!({})),
            Err(BackendError::Content(_))
        ));
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let b = HttpChatBackend::new(ProviderConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            schema: ProviderSchema::OpenAi,
            api_key_env: "TRIALMATCH_TEST_NO_SUCH_KEY".into(),
            timeout_secs: 2,
        });
        let err = b.complete(&ChatRequest::new("m", "s", "u")).unwrap_err();
        assert!(err.is_retryable(), "{err:?}");
    }
}

//! OpenAI-compatible `chat/completions` backend.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, Completion, LlmError, SampleRequest, API_KEY_ENV};
use crate::domain::Usage;
use crate::prompts::{Prompt, Role, PART_SEPARATOR};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    max_n: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// The system part becomes a `system` message; every other part is joined
/// into one `user` message.
pub fn messages(prompt: &Prompt) -> serde_json::Value {
    let mut out = Vec::new();
    for part in prompt.parts.iter().filter(|p| p.role == Role::System) {
        out.push(json!({"role": "system", "content": part.text}));
    }
    let user: Vec<&str> = prompt
        .parts
        .iter()
        .filter(|p| p.role == Role::User)
        .map(|p| p.text.as_str())
        .collect();
    if !user.is_empty() {
        out.push(json!({"role": "user", "content": user.join(PART_SEPARATOR)}));
    }
    serde_json::Value::Array(out)
}

fn is_context_length_error(body: &str) -> bool {
    body.contains("context_length_exceeded") || body.contains("maximum context length")
}

impl HttpBackend {
    /// Reads the bearer token from `COSTFIX_API_KEY` when set.
    pub fn new(endpoint_url: &str, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{API_KEY_ENV} is not set; sending unauthenticated requests");
        }
        Ok(Self {
            client,
            url: format!("{}/chat/completions", endpoint_url.trim_end_matches('/')),
            api_key,
            max_n: None,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_max_n(mut self, cap: Option<u32>) -> Self {
        self.max_n = cap;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &SampleRequest, n: u32) -> Result<Completion, LlmError> {
        let body = json!({
            "model": request.model_id,
            "messages": messages(&request.prompt),
            "n": n,
            "temperature": request.temperature,
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            if is_context_length_error(&text) {
                return Err(LlmError::BudgetExceeded(text));
            }
            return Err(LlmError::Provider {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| LlmError::Provider {
            status: status.as_u16(),
            body: format!("unreadable response ({e}): {text}"),
        })?;
        Ok(Completion {
            choices: parsed
                .choices
                .into_iter()
                .map(|c| c.message.content.unwrap_or_default())
                .collect(),
            usage: parsed.usage.map(|u| Usage {
                input_tokens: u.prompt_tokens,
                output_tokens: u.completion_tokens,
            }),
        })
    }

    fn max_n(&self) -> Option<u32> {
        self.max_n
    }
}

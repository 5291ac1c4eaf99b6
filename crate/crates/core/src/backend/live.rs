use std::fs;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatProvider, ChatRequest, Completion, Role};

pub const API_KEY_ENV: &str = "DVAR_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

/// HTTP chat-completion client.
pub struct LiveProvider {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveProvider {
    /// The environment variable `DVAR_API_KEY`, when set, takes precedence
    /// over any key in the configuration.
    pub fn new(mut config: LiveConfig) -> Result<Self, BackendError> {
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                config.api_key = Some(key);
            }
        }
        if config.url.is_empty() {
            return Err(BackendError::Config("live provider needs a url".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(LiveProvider { config, agent })
    }

    pub fn wire_body(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let last_user = request.messages.iter().rposition(|m| m.role == Role::User);
        let mut messages = Vec::with_capacity(request.messages.len());
        for (i, m) in request.messages.iter().enumerate() {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            if Some(i) == last_user && !request.attachments.is_empty() {
                let mut parts = vec![json!({"type": "text", "text": m.content})];
                for frame in &request.attachments {
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": {"url": data_url(Path::new(&frame.path))?}
                    }));
                }
                messages.push(json!({"role": role, "content": parts}));
            } else {
                messages.push(json!({"role": role, "content": m.content}));
            }
        }
        Ok(json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }))
    }
}

fn data_url(path: &Path) -> Result<String, BackendError> {
    let bytes = fs::read(path)
        .map_err(|e| BackendError::Contract(format!("attachment {}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
    #[serde(default)]
    prompt_tokens_details: Option<WirePromptDetails>,
}

#[derive(Deserialize)]
struct WirePromptDetails {
    #[serde(default)]
    cached_tokens: Option<u64>,
}

pub(crate) fn parse_wire_response(body: &str) -> Result<Completion, BackendError> {
    let parsed: WireResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Decode(e.to_string()))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Decode("response has no choices[0].message.content".into()))?;
    let (input, output, cached) = match parsed.usage {
        Some(u) => (
            Some(u.prompt_tokens),
            Some(u.completion_tokens),
            u.prompt_tokens_details.and_then(|d| d.cached_tokens),
        ),
        None => (None, None, None),
    };
    Ok(Completion { text, input_tokens: input, cached_input_tokens: cached, output_tokens: output })
}

impl ChatProvider for LiveProvider {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let body = self.wire_body(request)?;
        let mut call = self.agent.post(&self.config.url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => parse_wire_response(&text),
            429 | 500..=599 => Err(BackendError::Transport(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Http { status, body: text }),
        }
    }
}

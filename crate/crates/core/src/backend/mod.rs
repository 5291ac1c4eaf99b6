//! Chat and embedding providers, the prompt-prefix cache and the per-stage
//! token ledger.

mod cache;
mod embed;
mod ledger;
mod live;
mod scripted;
mod session;

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::FrameRef;

pub use cache::PrefixCache;
pub use embed::{cosine, hash_embed, EmbeddingVector, HashEmbedder, TextEmbedder, DEFAULT_DIMENSION};
pub use ledger::{ledger_totals, LedgerTotals, StageUsage, UsageLedger};
pub use live::{LiveConfig, LiveProvider, API_KEY_ENV};
pub use scripted::{request_digest, FixtureRecord, RecordingProvider, ScriptedProvider};
pub use session::Session;

/// Pipeline stage a request belongs to. Determines ledger bucketing and
/// the decoding contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Evidence,
    Debate,
    Compress,
    Arbiter,
    Diagnose,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Evidence,
        Stage::Debate,
        Stage::Compress,
        Stage::Arbiter,
        Stage::Diagnose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Evidence => "evidence",
            Stage::Debate => "debate",
            Stage::Compress => "compress",
            Stage::Arbiter => "arbiter",
            Stage::Diagnose => "diagnose",
        }
    }

    /// Stages that must be decoded greedily.
    pub fn requires_zero_temperature(self) -> bool {
        matches!(self, Stage::Compress | Stage::Arbiter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub session_id: String,
    pub stage: Stage,
    /// Machine-readable step name such as `turn/t1/r2/nma-response`. Used for
    /// logging and by programmatic providers; never part of the wire body or
    /// the fixture digest.
    pub label: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub attachments: Vec<FrameRef>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::Contract(format!(
                "{} request `{}` has no messages",
                self.stage.as_str(),
                self.label
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Contract(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        if self.stage.requires_zero_temperature() && self.temperature != 0.0 {
            return Err(BackendError::Contract(format!(
                "{} stage requires temperature 0, got {}",
                self.stage.as_str(),
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::Contract("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_tokens: u64,
    pub cached_input_tokens: u64,
    pub output_tokens: u64,
}

/// What a provider hands back before missing usage has been filled in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub cached_input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion { text: text.into(), ..Default::default() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("no scripted response for digest {digest} (stage {stage})")]
    ScriptMiss { digest: String, stage: String },
    #[error("request contract violated: {0}")]
    Contract(String),
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait ChatProvider: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
}

/// Bounded retry on transport failures only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 2, backoff: Duration::from_millis(500) }
    }
}

/// Default length function: number of maximal runs of non-whitespace.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub fn messages_tokens(messages: &[Message]) -> u64 {
    messages.iter().map(|m| whitespace_tokens(&m.content)).sum()
}

/// Validates the request and sends it, retrying transport errors with linear
/// backoff. Usage fields are returned as reported.
pub fn send_with_retry(
    provider: &dyn ChatProvider,
    request: &ChatRequest,
    policy: RetryPolicy,
) -> Result<Completion, BackendError> {
    request.validate()?;
    let mut attempt = 0u32;
    loop {
        match provider.send(request) {
            Ok(c) => return Ok(c),
            Err(e) if e.is_retryable() && attempt < policy.max_retries => {
                attempt += 1;
                tracing::warn!(label = %request.label, attempt, error = %e, "retrying provider call");
                if !policy.backoff.is_zero() {
                    thread::sleep(policy.backoff * attempt);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// One-shot completion outside any session. Missing usage is computed with
/// the whitespace length function and no cache credit.
pub fn complete(
    provider: &dyn ChatProvider,
    request: &ChatRequest,
    policy: RetryPolicy,
) -> Result<ChatResponse, BackendError> {
    let c = send_with_retry(provider, request, policy)?;
    let input = c.input_tokens.unwrap_or_else(|| messages_tokens(&request.messages));
    Ok(ChatResponse {
        input_tokens: input,
        cached_input_tokens: c.cached_input_tokens.unwrap_or(0).min(input),
        output_tokens: c.output_tokens.unwrap_or_else(|| whitespace_tokens(&c.text)),
        text: c.text,
    })
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync;

/// Provider backed by a closure. Handy for tests and for generating fixtures.
pub struct FnProvider {
    id: String,
    responder: Box<Responder>,
}

impl FnProvider {
    pub fn new<F>(id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        FnProvider { id: id.into(), responder: Box::new(f) }
    }
}

impl ChatProvider for FnProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (self.responder)(request).map(Completion::text)
    }
}

/// Replays a fixed queue of outcomes per request label, then falls back to
/// the last one. Used to script failure schedules.
pub struct QueueProvider {
    queues: Mutex<BTreeMap<String, Vec<Result<String, BackendError>>>>,
}

impl QueueProvider {
    pub fn new(queues: BTreeMap<String, Vec<Result<String, BackendError>>>) -> Self {
        QueueProvider { queues: Mutex::new(queues) }
    }
}

impl ChatProvider for QueueProvider {
    fn id(&self) -> &str {
        "queue"
    }

    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let mut queues = self.queues.lock().expect("queue lock");
        let key = request.label.split("/retry").next().unwrap_or(&request.label);
        let queue = queues.get_mut(key).ok_or_else(|| BackendError::ScriptMiss {
            digest: key.to_string(),
            stage: request.stage.as_str().to_string(),
        })?;
        let next = if queue.len() > 1 { queue.remove(0) } else { queue[0].clone() };
        next.map(Completion::text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    fn request(stage: Stage, temperature: f64) -> ChatRequest {
        ChatRequest {
            session_id: "s".into(),
            stage,
            label: "x".into(),
            messages: vec![Message::user("hello world")],
            temperature,
            max_output_tokens: 64,
            attachments: vec![],
        }
    }

    #[test]
    fn zero_temperature_contract() {
        let p = FnProvider::new("echo", |_| Ok("ok".into()));
        let err = complete(&p, &request(Stage::Compress, 0.7), RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, BackendError::Contract(_)));
        let err = complete(&p, &request(Stage::Arbiter, 0.1), RetryPolicy::default()).unwrap_err();
        assert!(matches!(err, BackendError::Contract(_)));
        assert!(complete(&p, &request(Stage::Debate, 0.7), RetryPolicy::default()).is_ok());
    }

    #[test]
    fn retries_transport_errors_at_most_twice() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let p = FnProvider::new("flaky", move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Transport("down".into()))
        });
        let policy = RetryPolicy { max_retries: 2, backoff: Duration::ZERO };
        assert!(complete(&p, &request(Stage::Evidence, 0.0), policy).is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn no_retry_on_contract_or_script_miss() {
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let p = FnProvider::new("miss", move |_| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::ScriptMiss { digest: "d".into(), stage: "evidence".into() })
        });
        let policy = RetryPolicy { max_retries: 2, backoff: Duration::ZERO };
        assert!(complete(&p, &request(Stage::Evidence, 0.0), policy).is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn usage_defaults_to_length_function() {
        let p = FnProvider::new("echo", |_| Ok("a b c".into()));
        let r = complete(&p, &request(Stage::Evidence, 0.0), RetryPolicy::default()).unwrap();
        assert_eq!((r.input_tokens, r.cached_input_tokens, r.output_tokens), (2, 0, 3));
    }
}

use crate::domain::FrameRef;

use super::{
    messages_tokens, send_with_retry, whitespace_tokens, BackendError, ChatProvider, ChatRequest,
    ChatResponse, Message, PrefixCache, RetryPolicy, Stage, UsageLedger,
};

/// A single-writer conversation context: one per video. Owns the usage ledger
/// and prefix cache for that video so concurrent sessions never share state.
pub struct Session<'a> {
    id: String,
    provider: &'a dyn ChatProvider,
    policy: RetryPolicy,
    max_output_tokens: u32,
    ledger: UsageLedger,
    cache: PrefixCache,
}

impl<'a> Session<'a> {
    pub fn new(id: impl Into<String>, provider: &'a dyn ChatProvider, policy: RetryPolicy) -> Self {
        Session {
            id: id.into(),
            provider,
            policy,
            max_output_tokens: 2048,
            ledger: UsageLedger::default(),
            cache: PrefixCache::new(),
        }
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n.max(1);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn provider(&self) -> &'a dyn ChatProvider {
        self.provider
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> UsageLedger {
        self.ledger
    }

    pub fn chat(
        &mut self,
        stage: Stage,
        label: impl Into<String>,
        messages: Vec<Message>,
        temperature: f64,
        attachments: Vec<FrameRef>,
    ) -> Result<ChatResponse, BackendError> {
        let request = ChatRequest {
            session_id: self.id.clone(),
            stage,
            label: label.into(),
            messages,
            temperature,
            max_output_tokens: self.max_output_tokens,
            attachments,
        };
        let completion = send_with_retry(self.provider, &request, self.policy)?;
        let estimated_cache = self.cache.cached_prefix_tokens(&request.messages);
        let input = completion
            .input_tokens
            .unwrap_or_else(|| messages_tokens(&request.messages));
        let response = ChatResponse {
            input_tokens: input,
            cached_input_tokens: completion.cached_input_tokens.unwrap_or(estimated_cache).min(input),
            output_tokens: completion
                .output_tokens
                .unwrap_or_else(|| whitespace_tokens(&completion.text)),
            text: completion.text,
        };
        tracing::debug!(
            session = %self.id,
            label = %request.label,
            input = response.input_tokens,
            cached = response.cached_input_tokens,
            output = response.output_tokens,
            "chat"
        );
        self.ledger.record(stage, &response);
        Ok(response)
    }
}

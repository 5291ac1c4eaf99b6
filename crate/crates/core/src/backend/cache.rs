use std::collections::HashSet;

use sha2::{Digest, Sha256};

use super::{whitespace_tokens, Message};

/// Tracks which message-sequence prefixes a session has already sent, so the
/// reusable part of a prompt can be credited as cached input.
#[derive(Debug, Clone, Default)]
pub struct PrefixCache {
    seen: HashSet<[u8; 32]>,
}

impl PrefixCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Token length of the longest prefix of `messages` that was previously
    /// sent in this session, then records `messages` for later calls.
    pub fn cached_prefix_tokens(&mut self, messages: &[Message]) -> u64 {
        self.cached_prefix_tokens_with(messages, whitespace_tokens)
    }

    pub fn cached_prefix_tokens_with(
        &mut self,
        messages: &[Message],
        length: impl Fn(&str) -> u64,
    ) -> u64 {
        let digests = prefix_digests(messages);
        let hit = digests.iter().rposition(|d| self.seen.contains(d)).map(|i| i + 1).unwrap_or(0);
        let cached = messages[..hit].iter().map(|m| length(&m.content)).sum();
        self.seen.extend(digests);
        cached
    }
}

fn prefix_digests(messages: &[Message]) -> Vec<[u8; 32]> {
    let mut hasher = Sha256::new();
    messages
        .iter()
        .map(|m| {
            let role: &[u8] = match m.role {
                super::Role::System => b"s",
                super::Role::User => b"u",
                super::Role::Assistant => b"a",
            };
            hasher.update(role);
            hasher.update((m.content.len() as u64).to_le_bytes());
            hasher.update(m.content.as_bytes());
            hasher.clone().finalize().into()
        })
        .collect()
}

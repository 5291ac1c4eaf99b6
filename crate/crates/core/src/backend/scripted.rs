use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatProvider, ChatRequest, Completion, Message, Stage};

/// One line of a scripted fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub digest: String,
    pub stage: Stage,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
}

#[derive(Serialize)]
struct DigestInput<'a> {
    stage: Stage,
    messages: &'a [Message],
}

/// SHA-256 (hex) of the stage plus the canonical JSON of the message list.
pub fn request_digest(stage: Stage, messages: &[Message]) -> String {
    let canonical =
        serde_json::to_vec(&DigestInput { stage, messages }).expect("messages serialize");
    hex::encode(Sha256::digest(&canonical))
}

/// Plays back fixture responses keyed by request digest.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    entries: HashMap<String, FixtureRecord>,
}

impl ScriptedProvider {
    pub fn from_records(records: impl IntoIterator<Item = FixtureRecord>) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        for r in records {
            if let Some(prev) = entries.get(&r.digest) {
                if prev != &r {
                    return Err(BackendError::Config(format!(
                        "fixture digest {} appears twice with different content",
                        r.digest
                    )));
                }
            }
            entries.insert(r.digest.clone(), r);
        }
        Ok(ScriptedProvider { entries })
    }

    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (n, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: FixtureRecord = serde_json::from_str(line).map_err(|e| {
                BackendError::Config(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(r);
        }
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ChatProvider for ScriptedProvider {
    fn id(&self) -> &str {
        "scripted"
    }

    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let digest = request_digest(request.stage, &request.messages);
        let r = self.entries.get(&digest).ok_or_else(|| BackendError::ScriptMiss {
            digest: digest.clone(),
            stage: request.stage.as_str().to_string(),
        })?;
        Ok(Completion {
            text: r.text.clone(),
            input_tokens: r.input_tokens,
            cached_input_tokens: r.cached_input_tokens,
            output_tokens: r.output_tokens,
        })
    }
}

/// Wraps a provider and captures every successful exchange as a fixture
/// record, so a live run can be replayed offline.
pub struct RecordingProvider<P> {
    inner: P,
    records: Mutex<(Vec<FixtureRecord>, HashMap<String, String>)>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider { inner, records: Mutex::new((Vec::new(), HashMap::new())) }
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.records.lock().expect("recorder lock").0.clone()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = Vec::new();
        for r in self.records() {
            serde_json::to_writer(&mut out, &r)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let c = self.inner.send(request)?;
        let digest = request_digest(request.stage, &request.messages);
        let mut guard = self.records.lock().expect("recorder lock");
        // A digest seen with a different reply would replay whichever call
        // happened to be recorded first.
        if let Some(prev) = guard.1.get(&digest) {
            if *prev != c.text {
                return Err(BackendError::Contract(format!(
                    "request `{}` repeats digest {digest} with a different reply",
                    request.label
                )));
            }
        } else {
            guard.1.insert(digest.clone(), c.text.clone());
            guard.0.push(FixtureRecord {
                digest,
                stage: request.stage,
                text: c.text.clone(),
                input_tokens: c.input_tokens,
                cached_input_tokens: c.cached_input_tokens,
                output_tokens: c.output_tokens,
            });
        }
        Ok(c)
    }
}

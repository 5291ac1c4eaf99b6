//! Knowledge base of observable generative phenomena: positive guidance
//! (known synthesis failure modes) and negative guidance (cues that misled
//! the pipeline before), retrieved by cosine similarity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{cosine, EmbeddingVector, HashEmbedder, Message, Session, Stage, TextEmbedder};
use crate::domain::Label;
use crate::harness::VerdictRecord;
use crate::schema::{chat_structured, extract_object, Fields, SchemaError, StructuredCall};
use crate::templates;

/// Cosine similarity at or above which a same-type entry counts as a duplicate.
pub const DUPLICATE_THRESHOLD: f64 = 0.95;
pub const MIN_DESCRIPTION_CHARS: usize = 20;
pub const MAX_DESCRIPTION_CHARS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceType {
    Positive,
    Negative,
}

impl GuidanceType {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceType::Positive => "positive",
            GuidanceType::Negative => "negative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Some(GuidanceType::Positive),
            "negative" => Some(GuidanceType::Negative),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Proactive,
    Reactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub entry_id: String,
    pub phenomenon: String,
    pub description: String,
    pub guidance_type: GuidanceType,
    pub provenance: Provenance,
    pub verified: bool,
    pub embedding: EmbeddingVector,
    pub created_at: DateTime<Utc>,
}

impl KbEntry {
    pub fn embedding_text(phenomenon: &str, description: &str) -> String {
        format!("{phenomenon}. {description}")
    }
}

/// Everything about an entry except its id and embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbCandidate {
    pub phenomenon: String,
    pub description: String,
    pub guidance_type: GuidanceType,
    pub provenance: Provenance,
    pub verified: bool,
    pub created_at: DateTime<Utc>,
}

impl KbCandidate {
    pub fn check(&self) -> Result<(), KbError> {
        if self.phenomenon.trim().is_empty() {
            return Err(KbError::Consistency("phenomenon must be nonempty".into()));
        }
        let chars = self.description.chars().count();
        if !(MIN_DESCRIPTION_CHARS..=MAX_DESCRIPTION_CHARS).contains(&chars) {
            return Err(KbError::Consistency(format!(
                "description length {chars} outside [{MIN_DESCRIPTION_CHARS}, {MAX_DESCRIPTION_CHARS}] characters"
            )));
        }
        Ok(())
    }

    /// Content-derived identifier, independent of insertion order.
    pub fn entry_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.guidance_type.as_str());
        h.update([0]);
        h.update(self.phenomenon.as_bytes());
        h.update([0]);
        h.update(self.description.as_bytes());
        format!("k{}", &hex::encode(h.finalize())[..12])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub entry: KbEntry,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub positive_hits: Vec<Hit>,
    pub negative_hits: Vec<Hit>,
    pub query_digest: String,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.positive_hits.is_empty() && self.negative_hits.is_empty()
    }

    /// Digest of the retrieved ids and similarities; recorded with each debate.
    pub fn context_digest(&self) -> String {
        let mut s = String::new();
        for (tag, hits) in [("+", &self.positive_hits), ("-", &self.negative_hits)] {
            for hit in hits {
                let _ = writeln!(s, "{tag}{}:{:.12}", hit.entry.entry_id, hit.similarity);
            }
        }
        short_digest(s.as_bytes())
    }

    /// Guidance block for prompts.
    pub fn render(&self) -> String {
        if self.is_empty() {
            return "Knowledge base guidance: none retrieved.".to_string();
        }
        let mut s = String::from("Knowledge base guidance.\n");
        if !self.positive_hits.is_empty() {
            s.push_str("Positive guidance (known generative behaviour):\n");
            for hit in &self.positive_hits {
                let _ = writeln!(s, "- [{}] {}: {}", hit.entry.entry_id, hit.entry.phenomenon, hit.entry.description);
            }
        }
        if !self.negative_hits.is_empty() {
            s.push_str("Negative guidance (cues that are often misleading):\n");
            for hit in &self.negative_hits {
                let _ = writeln!(s, "- [{}] {}: {}", hit.entry.entry_id, hit.entry.phenomenon, hit.entry.description);
            }
        }
        s.trim_end().to_string()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KbError {
    #[error("knowledge base is frozen at version {0}")]
    Frozen(String),
    #[error("knowledge base is already frozen")]
    AlreadyFrozen,
    #[error("consistency check failed: {0}")]
    Consistency(String),
    #[error("duplicate of existing entry {existing} (cosine {similarity:.3})")]
    Duplicate { existing: String, similarity: f64 },
    #[error("no entry with id {0}")]
    UnknownEntry(String),
    #[error("knowledge base file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbMeta {
    pub version: String,
    pub frozen: bool,
    pub embedder_id: String,
    pub dimension: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KbStats {
    pub entries: usize,
    pub positive: usize,
    pub negative: usize,
    pub proactive: usize,
    pub reactive: usize,
    pub verified: usize,
    pub frozen: bool,
    pub version: String,
}

#[derive(Clone)]
pub struct KbIndex {
    entries: Vec<KbEntry>,
    frozen: bool,
    version: String,
    embedder: Arc<dyn TextEmbedder>,
    include_unverified: bool,
}

impl std::fmt::Debug for KbIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KbIndex")
            .field("entries", &self.entries.len())
            .field("frozen", &self.frozen)
            .field("version", &self.version)
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

impl Default for KbIndex {
    fn default() -> Self {
        KbIndex::new(Arc::new(HashEmbedder::default()))
    }
}

fn short_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

/// Similarities within 1e-12 rank as equal, so normalisation noise cannot
/// override the entry-id tie break.
fn rank_key(similarity: f64) -> i64 {
    (similarity * 1e12).round() as i64
}

/// Order-independent digest over the entry records sorted by id.
pub fn content_version(entries: &[KbEntry]) -> String {
    let mut sorted: Vec<&KbEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
    let mut buf = Vec::new();
    for e in sorted {
        serde_json::to_writer(&mut buf, e).expect("entry serializes");
        buf.push(b'\n');
    }
    short_digest(&buf)
}

impl KbIndex {
    pub fn new(embedder: Arc<dyn TextEmbedder>) -> Self {
        KbIndex {
            entries: Vec::new(),
            frozen: false,
            version: content_version(&[]),
            embedder,
            include_unverified: false,
        }
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn embedder(&self) -> &dyn TextEmbedder {
        self.embedder.as_ref()
    }

    /// By default only verified entries are retrievable.
    pub fn set_include_unverified(&mut self, include: bool) {
        self.include_unverified = include;
    }

    pub fn meta(&self) -> KbMeta {
        KbMeta {
            version: self.version.clone(),
            frozen: self.frozen,
            embedder_id: self.embedder.id(),
            dimension: self.embedder.dimension(),
        }
    }

    fn ensure_mutable(&self) -> Result<(), KbError> {
        if self.frozen {
            Err(KbError::Frozen(self.version.clone()))
        } else {
            Ok(())
        }
    }

    fn touch(&mut self) {
        self.version = content_version(&self.entries);
    }

    pub fn embed_candidate(&self, candidate: &KbCandidate) -> EmbeddingVector {
        self.embedder.embed(&KbEntry::embedding_text(&candidate.phenomenon, &candidate.description))
    }

    fn find_duplicate(&self, guidance: GuidanceType, embedding: &EmbeddingVector) -> Option<(String, f64)> {
        self.entries
            .iter()
            .filter(|e| e.guidance_type == guidance)
            .map(|e| (e, cosine(&e.embedding, embedding)))
            .filter(|(_, sim)| *sim >= DUPLICATE_THRESHOLD)
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.entry_id.cmp(&a.0.entry_id)))
            .map(|(e, sim)| (e.entry_id.clone(), sim))
    }

    pub fn add_entry(&mut self, candidate: KbCandidate) -> Result<String, KbError> {
        self.ensure_mutable()?;
        candidate.check()?;
        let embedding = self.embed_candidate(&candidate);
        if embedding.zero_flag {
            return Err(KbError::Consistency("entry text has no tokens to embed".into()));
        }
        if let Some((existing, similarity)) = self.find_duplicate(candidate.guidance_type, &embedding) {
            return Err(KbError::Duplicate { existing, similarity });
        }
        let entry_id = candidate.entry_id();
        if self.entries.iter().any(|e| e.entry_id == entry_id) {
            return Err(KbError::Duplicate { existing: entry_id, similarity: 1.0 });
        }
        self.entries.push(KbEntry {
            entry_id: entry_id.clone(),
            phenomenon: candidate.phenomenon,
            description: candidate.description,
            guidance_type: candidate.guidance_type,
            provenance: candidate.provenance,
            verified: candidate.verified,
            embedding,
            created_at: candidate.created_at,
        });
        self.touch();
        Ok(entry_id)
    }

    /// Marks an entry as manually verified, making it retrievable.
    pub fn verify(&mut self, entry_id: &str) -> Result<(), KbError> {
        self.ensure_mutable()?;
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.entry_id == entry_id)
            .ok_or_else(|| KbError::UnknownEntry(entry_id.to_string()))?;
        entry.verified = true;
        self.touch();
        Ok(())
    }

    /// Drops later same-type near-duplicates (ordered by creation time, then
    /// id) and returns the removed ids.
    pub fn dedupe(&mut self) -> Result<Vec<String>, KbError> {
        self.ensure_mutable()?;
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            let (ea, eb) = (&self.entries[a], &self.entries[b]);
            ea.created_at.cmp(&eb.created_at).then_with(|| ea.entry_id.cmp(&eb.entry_id))
        });
        let mut kept: Vec<usize> = Vec::new();
        let mut removed = Vec::new();
        for i in order {
            let e = &self.entries[i];
            let dup = kept.iter().any(|&k| {
                let other = &self.entries[k];
                other.guidance_type == e.guidance_type
                    && cosine(&other.embedding, &e.embedding) >= DUPLICATE_THRESHOLD
            });
            if dup {
                removed.push(e.entry_id.clone());
            } else {
                kept.push(i);
            }
        }
        if !removed.is_empty() {
            self.entries.retain(|e| !removed.contains(&e.entry_id));
            self.touch();
        }
        Ok(removed)
    }

    pub fn freeze(&mut self) -> Result<String, KbError> {
        if self.frozen {
            return Err(KbError::AlreadyFrozen);
        }
        self.touch();
        self.frozen = true;
        Ok(self.version.clone())
    }

    /// Top-k positive and negative entries by cosine similarity to the query
    /// `trace_description + "\n" + debate_context`. Ties break by entry id.
    pub fn retrieve(
        &self,
        trace_description: &str,
        debate_context: &str,
        k_pos: usize,
        k_neg: usize,
    ) -> RetrievalResult {
        let query = format!("{trace_description}\n{debate_context}");
        let query_digest = short_digest(query.as_bytes());
        let q = self.embedder.embed(&query);
        if q.zero_flag {
            return RetrievalResult { query_digest, ..Default::default() };
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for e in self.entries.iter().filter(|e| e.verified || self.include_unverified) {
            let hit = Hit { entry: e.clone(), similarity: cosine(&q, &e.embedding) };
            match e.guidance_type {
                GuidanceType::Positive => pos.push(hit),
                GuidanceType::Negative => neg.push(hit),
            }
        }
        let rank = |hits: &mut Vec<Hit>, k: usize| {
            hits.sort_by(|a, b| {
                rank_key(b.similarity)
                    .cmp(&rank_key(a.similarity))
                    .then_with(|| a.entry.entry_id.cmp(&b.entry.entry_id))
            });
            hits.truncate(k);
        };
        rank(&mut pos, k_pos);
        rank(&mut neg, k_neg);
        RetrievalResult { positive_hits: pos, negative_hits: neg, query_digest }
    }

    pub fn stats(&self) -> KbStats {
        let count = |f: &dyn Fn(&KbEntry) -> bool| self.entries.iter().filter(|e| f(e)).count();
        KbStats {
            entries: self.entries.len(),
            positive: count(&|e| e.guidance_type == GuidanceType::Positive),
            negative: count(&|e| e.guidance_type == GuidanceType::Negative),
            proactive: count(&|e| e.provenance == Provenance::Proactive),
            reactive: count(&|e| e.provenance == Provenance::Reactive),
            verified: count(&|e| e.verified),
            frozen: self.frozen,
            version: self.version.clone(),
        }
    }

    /// Writes the metadata line followed by one entry per line, sorted by id.
    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        let file_err = |message: String| KbError::File { path: path.display().to_string(), message };
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.meta()).map_err(|e| file_err(e.to_string()))?;
        out.push(b'\n');
        let mut sorted: Vec<&KbEntry> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        for e in sorted {
            serde_json::to_writer(&mut out, e).map_err(|e| file_err(e.to_string()))?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| file_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<KbIndex, KbError> {
        let file_err = |message: String| KbError::File { path: path.display().to_string(), message };
        let raw = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let mut lines = raw.lines().filter(|l| !l.trim().is_empty());
        let meta: KbMeta = match lines.next() {
            Some(line) => serde_json::from_str(line).map_err(|e| file_err(format!("metadata line: {e}")))?,
            None => return Err(file_err("empty file (missing metadata line)".into())),
        };
        let embedder = HashEmbedder { dimension: meta.dimension };
        if embedder.id() != meta.embedder_id {
            return Err(file_err(format!("unsupported embedder {}", meta.embedder_id)));
        }
        let mut kb = KbIndex::new(Arc::new(embedder));
        for (n, line) in lines.enumerate() {
            let entry: KbEntry =
                serde_json::from_str(line).map_err(|e| file_err(format!("entry {}: {e}", n + 1)))?;
            let expected = kb.embedder.embed(&KbEntry::embedding_text(&entry.phenomenon, &entry.description));
            let drift = expected
                .values
                .iter()
                .zip(&entry.embedding.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if expected.values.len() != entry.embedding.values.len() || drift > 1e-9 {
                return Err(file_err(format!("entry {} embedding does not match its text", entry.entry_id)));
            }
            if kb.entries.iter().any(|e| e.entry_id == entry.entry_id) {
                return Err(file_err(format!("duplicate entry id {}", entry.entry_id)));
            }
            kb.entries.push(entry);
        }
        kb.touch();
        if meta.frozen && kb.version != meta.version {
            return Err(file_err(format!(
                "frozen at version {} but contents hash to {}",
                meta.version, kb.version
            )));
        }
        kb.frozen = meta.frozen;
        Ok(kb)
    }
}

/// Reads curated candidate records (JSONL). Lines of a KB file are accepted
/// too; the metadata line is skipped. Missing `provenance` defaults to
/// proactive, missing `verified` to true for proactive records, missing
/// `created_at` to `now`.
pub fn read_candidates(path: &Path, now: DateTime<Utc>) -> Result<Vec<KbCandidate>, KbError> {
    let file_err = |message: String| KbError::File { path: path.display().to_string(), message };
    let raw = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let map = extract_object(line).map_err(|e| file_err(format!("line {}: {e}", n + 1)))?;
        if map.contains_key("embedder_id") {
            continue;
        }
        out.push(candidate_from_map(&map, now).map_err(|e| file_err(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn candidate_from_map(
    map: &serde_json::Map<String, serde_json::Value>,
    now: DateTime<Utc>,
) -> Result<KbCandidate, KbError> {
    let mut f = Fields::new(map);
    let phenomenon = f.string("phenomenon").unwrap_or_default();
    let description = f.string("description").unwrap_or_default();
    let guidance = f.string("guidance_type");
    let provenance = f.string_or_empty("provenance");
    f.finish().map_err(|e| KbError::Consistency(e.to_string()))?;
    let guidance_type = guidance
        .as_deref()
        .and_then(GuidanceType::parse)
        .ok_or_else(|| KbError::Consistency("guidance_type must be positive or negative".into()))?;
    let provenance = match provenance.as_str() {
        "" | "proactive" => Provenance::Proactive,
        "reactive" => Provenance::Reactive,
        other => return Err(KbError::Consistency(format!("unknown provenance `{other}`"))),
    };
    let verified = match map.get("verified") {
        Some(serde_json::Value::Bool(b)) => *b,
        None => provenance == Provenance::Proactive,
        Some(_) => return Err(KbError::Consistency("`verified` must be a boolean".into())),
    };
    let created_at = match map.get("created_at").and_then(|v| v.as_str()) {
        Some(s) => s
            .parse::<DateTime<Utc>>()
            .map_err(|e| KbError::Consistency(format!("created_at: {e}")))?,
        None => now,
    };
    Ok(KbCandidate { phenomenon, description, guidance_type, provenance, verified, created_at })
}

pub fn write_candidates(path: &Path, candidates: &[KbCandidate]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for c in candidates {
        serde_json::to_writer(&mut out, c)?;
        out.push(b'\n');
    }
    fs::write(path, out)
}

fn parse_diagnosis(raw: &str, now: DateTime<Utc>) -> Result<Vec<KbCandidate>, SchemaError> {
    let map = extract_object(raw)?;
    let entries = match map.get("entries") {
        Some(serde_json::Value::Array(items)) => items,
        _ => return Err(SchemaError::one("missing `entries` array")),
    };
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, item) in entries.iter().enumerate() {
        let Some(obj) = item.as_object() else {
            problems.push(format!("entries[{i}] is not an object"));
            continue;
        };
        let mut f = Fields::new(obj);
        let phenomenon = f.nonempty_string("phenomenon");
        let description = f.nonempty_string("description");
        let guidance = f.string_or_empty("guidance_type");
        if let Err(e) = f.finish() {
            problems.extend(e.problems.into_iter().map(|p| format!("entries[{i}]: {p}")));
            continue;
        }
        let guidance_type = if guidance.is_empty() {
            GuidanceType::Negative
        } else {
            match GuidanceType::parse(&guidance) {
                Some(g) => g,
                None => {
                    problems.push(format!("entries[{i}]: unknown guidance_type `{guidance}`"));
                    continue;
                }
            }
        };
        out.push(KbCandidate {
            phenomenon: phenomenon.unwrap_or_default(),
            description: description.unwrap_or_default(),
            guidance_type,
            provenance: Provenance::Reactive,
            verified: false,
            created_at: now,
        });
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(SchemaError { problems })
    }
}

/// Asks the provider why a misclassified video went wrong and turns the
/// answer into unverified reactive candidates. Failures are logged and yield
/// an empty list.
pub fn reactive_diagnose(
    session: &mut Session<'_>,
    record: &VerdictRecord,
    truth: Label,
    now: DateTime<Utc>,
) -> Vec<KbCandidate> {
    if record.verdict.label == truth {
        tracing::warn!(entry = %record.entry_id, "reactive diagnosis requested for a correct prediction");
        return Vec::new();
    }
    let reasoning = serde_json::to_string_pretty(&record.reasoning_view()).unwrap_or_default();
    let messages = vec![
        Message::system(templates::DIAGNOSE.text),
        Message::user(format!(
            "Video: {}\nPredicted label: {}\nTrue label: {truth}\nReasoning trace:\n{reasoning}",
            record.entry_id, record.verdict.label
        )),
    ];
    let call = StructuredCall {
        stage: Stage::Diagnose,
        label: "diagnose".into(),
        messages: &messages,
        temperature: 0.0,
        attachments: Vec::new(),
        retries: 1,
    };
    match chat_structured(session, call, |raw| parse_diagnosis(raw, now)) {
        Ok(s) => s.value,
        Err(e) => {
            tracing::warn!(entry = %record.entry_id, error = %e, "failure diagnosis produced no candidates");
            Vec::new()
        }
    }
}

/// Groups candidates by guidance type, for reporting.
pub fn count_by_type(candidates: &[KbCandidate]) -> BTreeMap<GuidanceType, usize> {
    let mut m = BTreeMap::new();
    for c in candidates {
        *m.entry(c.guidance_type).or_insert(0) += 1;
    }
    m
}

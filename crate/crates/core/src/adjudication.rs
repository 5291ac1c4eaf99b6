//! Stage 3: explanatory-cost adjudication.
//!
//! Resolved debates contribute their categorical vote directly. Each
//! unresolved trace is explained twice, once per stance, under the same
//! parsimony template with greedy decoding; the cost gap is the natural
//! explanation's length minus the generative one's.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Message, Session, Stage};
use crate::debate::{DebateOutcome, DebateRecord};
use crate::domain::{EvidenceSet, EvidenceSignal, Stance, Trace};
use crate::knowledge::RetrievalResult;
use crate::templates;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    /// Count of maximal non-whitespace runs.
    #[default]
    Whitespace,
    /// Completion tokens as reported by the provider.
    Provider,
}

#[derive(Debug, Error)]
pub enum AdjudicationError {
    #[error("trace {0} is resolved; only unresolved traces are compressed")]
    NotUnresolved(String),
    #[error("no compressed explanations for unresolved trace {0}")]
    MissingCompression(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Indices into the record list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub resolved: Vec<(usize, i8)>,
    pub unresolved: Vec<usize>,
}

pub fn partition(records: &[DebateRecord]) -> Partition {
    let mut p = Partition::default();
    for (i, r) in records.iter().enumerate() {
        match r.outcome {
            DebateOutcome::Resolved { value } => p.resolved.push((i, value)),
            DebateOutcome::Unresolved => p.unresolved.push(i),
        }
    }
    p
}

pub fn description_length(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

pub fn cost_gap(len_nat: u64, len_gen: u64) -> i64 {
    len_nat as i64 - len_gen as i64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub stance: Stance,
    pub text: String,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedPair {
    pub trace_id: String,
    pub nat: Explanation,
    pub gen: Explanation,
    pub template_id: String,
    pub priors_digest: String,
}

impl CompressedPair {
    pub fn cost_gap(&self) -> i64 {
        cost_gap(self.nat.length, self.gen.length)
    }
}

fn stance_name(stance: Stance) -> &'static str {
    match stance {
        Stance::Nat => "natural",
        Stance::Gen => "generative",
    }
}

/// One greedy-decoded compression of the debated explanation under `stance`.
pub fn compress(
    session: &mut Session<'_>,
    trace: &Trace,
    record: &DebateRecord,
    priors: &RetrievalResult,
    stance: Stance,
    mode: LengthMode,
) -> Result<Explanation, AdjudicationError> {
    if record.outcome != DebateOutcome::Unresolved {
        return Err(AdjudicationError::NotUnresolved(record.trace_id.clone()));
    }
    let messages = vec![
        Message::system(templates::COMPRESS.render(&[("stance", stance_name(stance))])),
        Message::user(format!(
            "Trace {}: {}\nDebate trajectory:\n{}{}\nWrite the compressed {} explanation.",
            trace.trace_id,
            trace.description,
            record.transcript(),
            priors.render(),
            stance_name(stance)
        )),
    ];
    let response = session.chat(
        Stage::Compress,
        format!("compress/{}/{}", record.trace_id, stance.as_str()),
        messages,
        0.0,
        Vec::new(),
    )?;
    let length = match mode {
        LengthMode::Whitespace => description_length(&response.text),
        LengthMode::Provider => response.output_tokens,
    };
    Ok(Explanation { stance, text: response.text, length })
}

pub fn compress_pair(
    session: &mut Session<'_>,
    trace: &Trace,
    record: &DebateRecord,
    priors: &RetrievalResult,
    mode: LengthMode,
) -> Result<CompressedPair, AdjudicationError> {
    let nat = compress(session, trace, record, priors, Stance::Nat, mode)?;
    let gen = compress(session, trace, record, priors, Stance::Gen, mode)?;
    Ok(CompressedPair {
        trace_id: record.trace_id.clone(),
        nat,
        gen,
        template_id: templates::COMPRESS.id.to_string(),
        priors_digest: priors.context_digest(),
    })
}

/// One signal per record, in record order.
pub fn build_evidence_set(
    records: &[DebateRecord],
    partition: &Partition,
    compressions: &BTreeMap<String, CompressedPair>,
) -> Result<EvidenceSet, AdjudicationError> {
    let mut signals: Vec<(usize, EvidenceSignal)> = partition
        .resolved
        .iter()
        .map(|&(i, v)| (i, EvidenceSignal::resolved(records[i].trace_id.clone(), v)))
        .collect();
    for &i in &partition.unresolved {
        let id = &records[i].trace_id;
        let pair = compressions
            .get(id)
            .ok_or_else(|| AdjudicationError::MissingCompression(id.clone()))?;
        signals.push((i, EvidenceSignal::unresolved(id.clone(), pair.cost_gap())));
    }
    signals.sort_by_key(|(i, _)| *i);
    Ok(EvidenceSet { signals: signals.into_iter().map(|(_, s)| s).collect() })
}

/// Evidence when cost comparison is disabled: unresolved traces carry a zero
/// gap and so contribute no direction.
pub fn evidence_without_cost(records: &[DebateRecord], partition: &Partition) -> EvidenceSet {
    let zeros = partition
        .unresolved
        .iter()
        .map(|&i| {
            let id = records[i].trace_id.clone();
            let blank = |stance| Explanation { stance, text: String::new(), length: 0 };
            (
                id.clone(),
                CompressedPair {
                    trace_id: id,
                    nat: blank(Stance::Nat),
                    gen: blank(Stance::Gen),
                    template_id: String::new(),
                    priors_digest: String::new(),
                },
            )
        })
        .collect();
    build_evidence_set(records, partition, &zeros).expect("every unresolved trace has a zero pair")
}

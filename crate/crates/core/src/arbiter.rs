//! Stage 4: consolidate the evidence set into one verdict.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{BackendError, Message, Session, Stage};
use crate::debate::DebateRecord;
use crate::domain::{DecidedBy, EvidenceSet, FrameRef, Label, Verdict};
use crate::schema::{chat_structured, extract_object, Fields, SchemaError, StructuredCall, StructuredError};
use crate::templates;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArbiterMode {
    /// Reference rule only, no provider call.
    Reference,
    /// Provider supplies rationale and evidence; the label is always the
    /// reference label.
    #[default]
    Strict,
    /// Validated provider label stands.
    Llm,
}

/// Deterministic aggregation: resolved votes count as-is, unresolved cost
/// gaps by sign. Positive score means fake; ties and empty sets are real.
pub fn reference_aggregate(evidence: &EvidenceSet, dead_band: u64) -> Verdict {
    let signs: Vec<i8> = evidence.signals.iter().map(|s| s.sign(dead_band)).collect();
    let score: i64 = signs.iter().map(|&s| i64::from(s)).sum();
    let label = if score > 0 { Label::Fake } else { Label::Real };
    let wanted: i8 = if label == Label::Fake { 1 } else { -1 };
    let supporting_trace_ids: Vec<String> = evidence
        .signals
        .iter()
        .zip(&signs)
        .filter(|(_, &s)| s == wanted)
        .map(|(sig, _)| sig.trace_id.clone())
        .collect();
    let confidence = if signs.is_empty() {
        0.5
    } else {
        let agree = supporting_trace_ids.len() as f64 / signs.len() as f64;
        if score == 0 {
            agree.max(0.5)
        } else {
            agree
        }
    };
    let (pos, neg) = (
        signs.iter().filter(|&&s| s > 0).count(),
        signs.iter().filter(|&&s| s < 0).count(),
    );
    let rationale = if signs.is_empty() {
        "No forgery traces were found; defaulting to authentic.".to_string()
    } else {
        format!(
            "Aggregate score {score}: {pos} signal(s) favour a generative origin, {neg} favour a natural one, {} neutral.",
            signs.len() - pos - neg
        )
    };
    Verdict { label, confidence, supporting_trace_ids, rationale, decided_by: DecidedBy::ReferenceRule }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbiterOutcome {
    pub verdict: Verdict,
    /// Provider label differed from the reference label (strict mode).
    pub disagreement: bool,
    /// Provider output failed validation; reference verdict used.
    pub fallback: bool,
}

fn parse_verdict(raw: &str, known_ids: &BTreeSet<&str>) -> Result<Verdict, SchemaError> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map);
    let label = f.string("label");
    let confidence = f.number("confidence");
    let supporting = f.string_list("supporting_trace_ids");
    if f.get("supporting_trace_ids").is_none() {
        f.problems.push("missing `supporting_trace_ids`".into());
    }
    let rationale = f.nonempty_string("rationale");
    let label = match label.as_deref() {
        Some(s) => match Label::parse(s) {
            Some(l) => Some(l),
            None => {
                f.problems.push(format!("`label` must be real or fake, got `{s}`"));
                None
            }
        },
        None => None,
    };
    if let Some(c) = confidence {
        if !(0.0..=1.0).contains(&c) {
            f.problems.push(format!("`confidence` {c} outside [0, 1]"));
        }
    }
    for id in &supporting {
        if !known_ids.contains(id.as_str()) {
            f.problems.push(format!("unknown trace id `{id}` in supporting_trace_ids"));
        }
    }
    f.finish()?;
    Ok(Verdict {
        label: label.expect("checked"),
        confidence: confidence.expect("checked"),
        supporting_trace_ids: supporting,
        rationale: rationale.unwrap_or_default(),
        decided_by: DecidedBy::LlmArbiter,
    })
}

fn arbiter_prompt(evidence: &EvidenceSet, records: &[DebateRecord], key_frame: Option<&FrameRef>) -> String {
    let debates: Vec<_> = records
        .iter()
        .map(|r| {
            json!({
                "trace_id": r.trace_id,
                "outcome": r.outcome,
                "rounds_used": r.rounds_used,
                "generative_hypothesis": r.hypothesis_gen.statement,
                "natural_hypothesis": r.hypothesis_nat.statement,
            })
        })
        .collect();
    let mut s = format!(
        "Evidence signals:\n{}\nDebate records (for interpretability only):\n{}",
        serde_json::to_string_pretty(&evidence.signals).expect("signals serialize"),
        serde_json::to_string_pretty(&debates).expect("records serialize"),
    );
    if let Some(frame) = key_frame {
        s.push_str(&format!("\nKey frame at t = {:.3} s is attached.", frame.timestamp));
    }
    s
}

/// Provider-backed arbitration with schema validation. Schema failure after
/// one retry falls back to the reference verdict.
pub fn llm_arbitrate(
    session: &mut Session<'_>,
    evidence: &EvidenceSet,
    records: &[DebateRecord],
    key_frame: Option<&FrameRef>,
    mode: ArbiterMode,
    dead_band: u64,
) -> Result<ArbiterOutcome, BackendError> {
    let reference = reference_aggregate(evidence, dead_band);
    if mode == ArbiterMode::Reference {
        return Ok(ArbiterOutcome { verdict: reference, disagreement: false, fallback: false });
    }
    let known: BTreeSet<&str> = evidence.signals.iter().map(|s| s.trace_id.as_str()).collect();
    let messages = vec![
        Message::system(templates::ARBITER.text),
        Message::user(arbiter_prompt(evidence, records, key_frame)),
    ];
    let call = StructuredCall {
        stage: Stage::Arbiter,
        label: "arbiter".into(),
        messages: &messages,
        temperature: 0.0,
        attachments: key_frame.cloned().into_iter().collect(),
        retries: 1,
    };
    let proposed = match chat_structured(session, call, |raw| parse_verdict(raw, &known)) {
        Ok(s) => s.value,
        Err(StructuredError::Schema { source, .. }) => {
            tracing::warn!(session = %session.id(), error = %source, "arbiter output invalid, using reference rule");
            return Ok(ArbiterOutcome { verdict: reference, disagreement: false, fallback: true });
        }
        Err(StructuredError::Backend(e)) => return Err(e),
    };
    let disagreement = proposed.label != reference.label;
    let verdict = match mode {
        ArbiterMode::Llm => proposed,
        _ => Verdict {
            label: reference.label,
            confidence: reference.confidence,
            supporting_trace_ids: if disagreement {
                reference.supporting_trace_ids.clone()
            } else {
                proposed.supporting_trace_ids
            },
            rationale: proposed.rationale,
            decided_by: DecidedBy::LlmArbiter,
        },
    };
    if disagreement {
        tracing::warn!(session = %session.id(), reference = %reference.label, "arbiter label disagrees with reference rule");
    }
    Ok(ArbiterOutcome { verdict, disagreement, fallback: false })
}

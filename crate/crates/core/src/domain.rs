//! Shared domain types for the detection pipeline and the signal algebra.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binary authenticity label. `Fake` is the positive class for metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An opaque handle to one sampled frame. Pixels are never decoded here; the
/// path is handed to providers that accept image attachments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub path: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub video_id: String,
    pub duration_seconds: f64,
    pub fps: f64,
    pub frames: Vec<FrameRef>,
    pub key_frame_index: usize,
}

impl VideoClip {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn key_frame(&self) -> &FrameRef {
        &self.frames[self.key_frame_index]
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.duration_seconds > 0.0) || !(self.fps > 0.0) {
            return Err(DomainError::InvalidClip(format!(
                "duration {} and fps {} must both be positive",
                self.duration_seconds, self.fps
            )));
        }
        let expected = frame_count(self.duration_seconds, self.fps);
        if self.frames.len() != expected {
            return Err(DomainError::InvalidClip(format!(
                "expected {expected} frames, found {}",
                self.frames.len()
            )));
        }
        for pair in self.frames.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(DomainError::InvalidClip(
                    "frame timestamps must be strictly increasing".into(),
                ));
            }
        }
        if let Some(last) = self.frames.last() {
            if last.timestamp >= self.duration_seconds {
                return Err(DomainError::InvalidClip(format!(
                    "timestamp {} is not before the clip end {}",
                    last.timestamp, self.duration_seconds
                )));
            }
        }
        if self.key_frame_index >= self.frames.len() {
            return Err(DomainError::InvalidClip(format!(
                "key frame index {} out of range for {} frames",
                self.key_frame_index,
                self.frames.len()
            )));
        }
        Ok(())
    }
}

/// Number of uniformly sampled frames for a clip: `max(1, floor(fps * duration))`.
pub fn frame_count(duration_seconds: f64, fps: f64) -> usize {
    let raw = (fps * duration_seconds).floor();
    if raw.is_finite() && raw >= 1.0 {
        raw as usize
    } else {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObservation {
    pub summary: String,
    #[serde(default)]
    pub environment: String,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub interactions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceCategory {
    Temporal,
    Physical,
    Texture,
    Lighting,
    Geometry,
    Other,
}

impl TraceCategory {
    /// Lenient mapping from provider text; anything unrecognised lands in `Other`.
    pub fn from_loose(s: &str) -> TraceCategory {
        match s.trim().to_ascii_lowercase().as_str() {
            "temporal" => TraceCategory::Temporal,
            "physical" => TraceCategory::Physical,
            "texture" => TraceCategory::Texture,
            "lighting" => TraceCategory::Lighting,
            "geometry" => TraceCategory::Geometry,
            _ => TraceCategory::Other,
        }
    }
}

/// One observed anomaly that the debate has to explain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: String,
    pub description: String,
    pub category: TraceCategory,
    pub frame_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Nat,
    Gen,
}

impl Stance {
    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Nat => "nat",
            Stance::Gen => "gen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub stance: Stance,
    pub statement: String,
    #[serde(default)]
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    Resolved,
    Unresolved,
}

/// Per-trace signal: a categorical vote for resolved debates or a cost gap
/// (natural minus generative description length) for unresolved ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSignal {
    pub trace_id: String,
    pub kind: SignalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_value: Option<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_gap: Option<i64>,
}

impl EvidenceSignal {
    pub fn resolved(trace_id: impl Into<String>, value: i8) -> Self {
        debug_assert!(value == 1 || value == -1);
        EvidenceSignal {
            trace_id: trace_id.into(),
            kind: SignalKind::Resolved,
            resolved_value: Some(value),
            cost_gap: None,
        }
    }

    pub fn unresolved(trace_id: impl Into<String>, cost_gap: i64) -> Self {
        EvidenceSignal {
            trace_id: trace_id.into(),
            kind: SignalKind::Unresolved,
            resolved_value: None,
            cost_gap: Some(cost_gap),
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        match (self.kind, self.resolved_value, self.cost_gap) {
            (SignalKind::Resolved, Some(1 | -1), None) => Ok(()),
            (SignalKind::Unresolved, None, Some(_)) => Ok(()),
            _ => Err(DomainError::InvalidSignal(self.trace_id.clone())),
        }
    }

    /// Direction of this signal after applying the dead band to cost gaps.
    pub fn sign(&self, dead_band: u64) -> i8 {
        match self.kind {
            SignalKind::Resolved => self.resolved_value.unwrap_or(0),
            SignalKind::Unresolved => signal_sign(self.cost_gap.unwrap_or(0), dead_band),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub signals: Vec<EvidenceSignal>,
}

impl EvidenceSet {
    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    ReferenceRule,
    LlmArbiter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub confidence: f64,
    pub supporting_trace_ids: Vec<String>,
    pub rationale: String,
    pub decided_by: DecidedBy,
}

impl Verdict {
    /// The four-field arbiter output record, serialized on one line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&VerdictLine::from(self)).expect("verdict line serializes")
    }
}

/// Arbiter output schema. Field names are part of the external interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub label: Label,
    pub confidence: f64,
    pub supporting_trace_ids: Vec<String>,
    pub rationale: String,
}

impl From<&Verdict> for VerdictLine {
    fn from(v: &Verdict) -> Self {
        VerdictLine {
            label: v.label,
            confidence: v.confidence,
            supporting_trace_ids: v.supporting_trace_ids.clone(),
            rationale: v.rationale.clone(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("trace {0}: description is empty")]
    EmptyDescription(String),
    #[error("trace {trace_id}: frame index {index} out of range for {frame_count} frames")]
    FrameIndexOutOfRange {
        trace_id: String,
        index: usize,
        frame_count: usize,
    },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("signal for trace {0} does not match its kind")]
    InvalidSignal(String),
}

/// Sign of a cost gap with a symmetric dead band. Positive favours the
/// generative hypothesis because the gap is natural minus generative length.
pub fn signal_sign(cost_gap: i64, dead_band: u64) -> i8 {
    let band = i128::from(dead_band);
    let gap = i128::from(cost_gap);
    if gap > band {
        1
    } else if gap < -band {
        -1
    } else {
        0
    }
}

pub fn validate_trace(trace: &Trace, frame_count: usize) -> Result<(), DomainError> {
    if trace.description.trim().is_empty() {
        return Err(DomainError::EmptyDescription(trace.trace_id.clone()));
    }
    if let Some(&index) = trace.frame_indices.iter().find(|&&i| i >= frame_count) {
        return Err(DomainError::FrameIndexOutOfRange {
            trace_id: trace.trace_id.clone(),
            index,
            frame_count,
        });
    }
    Ok(())
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::{Stage, StageUsage, UsageLedger};
use crate::domain::Label;

use super::Metrics;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRow {
    pub stage: String,
    pub calls: u64,
    pub input_tokens: u64,
    pub cached_input_tokens: u64,
    pub output_tokens: u64,
    pub total_tokens: u64,
}

impl TokenRow {
    fn from_usage(stage: &str, u: StageUsage) -> Self {
        TokenRow {
            stage: stage.to_string(),
            calls: u.calls,
            input_tokens: u.input_tokens,
            cached_input_tokens: u.cached_input_tokens,
            output_tokens: u.output_tokens,
            total_tokens: u.input_tokens + u.output_tokens,
        }
    }
}

/// Per-stage token consumption plus totals. `videos` is the divisor for
/// per-video averages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTable {
    pub rows: Vec<TokenRow>,
    pub total: TokenRow,
    pub videos: usize,
    pub average_total_per_video: f64,
}

pub fn stage_title(stage: Stage) -> &'static str {
    match stage {
        Stage::Evidence => "evidence discovery",
        Stage::Debate => "adversarial debate",
        Stage::Compress => "cost adjudication",
        Stage::Arbiter => "arbiter",
        Stage::Diagnose => "failure diagnosis",
    }
}

pub fn token_table(ledger: &UsageLedger, videos: usize) -> TokenTable {
    let rows: Vec<TokenRow> = Stage::ALL
        .iter()
        .filter(|&&s| s != Stage::Diagnose || ledger.stage(s).calls > 0)
        .map(|&s| TokenRow::from_usage(stage_title(s), ledger.stage(s)))
        .collect();
    let t = ledger.totals();
    let total = TokenRow {
        stage: "total".into(),
        calls: rows.iter().map(|r| r.calls).sum(),
        input_tokens: t.input_tokens,
        cached_input_tokens: t.cached_input_tokens,
        output_tokens: t.output_tokens,
        total_tokens: t.grand_total,
    };
    let average_total_per_video = if videos == 0 { 0.0 } else { total.total_tokens as f64 / videos as f64 };
    TokenTable { rows, total, videos, average_total_per_video }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryOutcome {
    pub entry_id: String,
    pub label: Label,
    pub predicted: Label,
    pub confidence: f64,
    pub arbiter_disagreement: bool,
    pub arbiter_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub entries: usize,
    pub succeeded: usize,
    pub excluded: usize,
    pub metrics: Option<Metrics>,
    pub tokens: TokenTable,
    pub config_digest: String,
    pub kb_version: String,
    pub arbiter_disagreements: usize,
    pub arbiter_fallbacks: usize,
    pub kb_candidates: Option<usize>,
    pub outcomes: Vec<EntryOutcome>,
}

pub fn render_summary(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "entries: {} (succeeded {}, excluded {})", s.entries, s.succeeded, s.excluded);
    let _ = writeln!(out, "config: {}  kb: {}", s.config_digest, s.kb_version);
    match &s.metrics {
        Some(m) => {
            let c = m.confusion;
            let _ = writeln!(out, "ACC {:.2}%  F1 {:.2}%", m.accuracy * 100.0, m.f1 * 100.0);
            let _ = writeln!(out, "TP {}  FP {}  FN {}  TN {}", c.tp, c.fp, c.fn_, c.tn);
        }
        None => {
            let _ = writeln!(out, "no successful entries; metrics unavailable");
        }
    }
    let _ = writeln!(
        out,
        "arbiter disagreements: {}  fallbacks: {}",
        s.arbiter_disagreements, s.arbiter_fallbacks
    );
    if let Some(n) = s.kb_candidates {
        let _ = writeln!(out, "knowledge candidates proposed: {n}");
    }
    let _ = writeln!(
        out,
        "\n{:<22}{:>8}{:>12}{:>12}{:>12}{:>12}",
        "stage", "calls", "input", "cached", "output", "total"
    );
    for r in s.tokens.rows.iter().chain(std::iter::once(&s.tokens.total)) {
        let _ = writeln!(
            out,
            "{:<22}{:>8}{:>12}{:>12}{:>12}{:>12}",
            r.stage, r.calls, r.input_tokens, r.cached_input_tokens, r.output_tokens, r.total_tokens
        );
    }
    let _ = writeln!(
        out,
        "average tokens per video: {:.1} over {} video(s)",
        s.tokens.average_total_per_video, s.tokens.videos
    );
    out
}

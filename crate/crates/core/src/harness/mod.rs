//! End-to-end detection, benchmarking and reporting.

mod metrics;
mod report;
mod subset;

pub use metrics::{compute_metrics, Confusion, Metrics, MetricsError};
pub use report::{render_summary, stage_title, token_table, EntryOutcome, RunSummary, TokenRow, TokenTable};
pub use subset::stratified_subset;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Utc;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adjudication::{self, AdjudicationError, CompressedPair};
use crate::arbiter::{llm_arbitrate, reference_aggregate};
use crate::backend::{BackendError, ChatProvider, Session, UsageLedger};
use crate::config::RunConfig;
use crate::debate::{self, DebateError, DebateRecord};
use crate::domain::{EvidenceSet, Label, SceneObservation, Trace, Verdict};
use crate::evidence::{self, EvidenceError};
use crate::knowledge::{self, KbError, KbIndex, RetrievalResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("knowledge base must be frozen before detection")]
    KbNotFrozen,
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Debate(#[from] DebateError),
    #[error(transparent)]
    Adjudication(#[from] AdjudicationError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Frame directory or video file; relative paths resolve against the
    /// manifest's directory.
    pub source: PathBuf,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

/// Reads a JSONL manifest. Ids must be unique.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, HarnessError> {
    let bad = |message: String| HarnessError::Manifest { path: path.display().to_string(), message };
    let raw = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry =
            serde_json::from_str(line).map_err(|err| bad(format!("line {}: {err}", n + 1)))?;
        if e.id.is_empty() {
            return Err(bad(format!("line {}: empty id", n + 1)));
        }
        if !seen.insert(e.id.clone()) {
            return Err(bad(format!("line {}: duplicate id `{}`", n + 1, e.id)));
        }
        if e.source.is_relative() {
            e.source = base.join(&e.source);
        }
        out.push(e);
    }
    Ok(out)
}

/// Everything produced for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub entry_id: String,
    pub true_label: Option<Label>,
    pub generator: Option<String>,
    pub verdict: Verdict,
    pub arbiter_disagreement: bool,
    pub arbiter_fallback: bool,
    pub frame_count: usize,
    pub key_frame_index: usize,
    pub scene: SceneObservation,
    pub traces: Vec<Trace>,
    pub debates: Vec<DebateRecord>,
    pub compressions: Vec<CompressedPair>,
    pub evidence: EvidenceSet,
    pub usage: UsageLedger,
    pub wall_time_ms: Option<u64>,
    pub config_digest: String,
    pub kb_version: String,
}

impl VerdictRecord {
    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("record serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    /// The reasoning chain without bookkeeping fields.
    pub fn reasoning_view(&self) -> Value {
        json!({
            "scene": self.scene,
            "traces": self.traces,
            "debates": self.debates.iter().map(|d| json!({
                "trace_id": d.trace_id,
                "outcome": d.outcome,
                "hypothesis_gen": d.hypothesis_gen,
                "hypothesis_nat": d.hypothesis_nat,
                "transcript": d.transcript(),
            })).collect::<Vec<_>>(),
            "compressions": self.compressions,
            "evidence": self.evidence.signals,
            "verdict": self.verdict,
        })
    }
}

/// Loads the configured knowledge base, or a frozen empty one when no path
/// is set.
pub fn load_kb(config: &RunConfig) -> Result<KbIndex, HarnessError> {
    let mut kb = match &config.kb_path {
        Some(path) => KbIndex::load(path)?,
        None => {
            let mut kb = KbIndex::default();
            kb.freeze()?;
            kb
        }
    };
    kb.set_include_unverified(config.include_unverified);
    Ok(kb)
}

pub struct Pipeline<'a> {
    config: &'a RunConfig,
    provider: &'a dyn ChatProvider,
    kb: &'a KbIndex,
    work_dir: PathBuf,
    config_digest: String,
}

impl<'a> Pipeline<'a> {
    /// `work_dir` receives extracted frames when sources are video files.
    pub fn new(
        config: &'a RunConfig,
        provider: &'a dyn ChatProvider,
        kb: &'a KbIndex,
        work_dir: impl Into<PathBuf>,
    ) -> Result<Self, HarnessError> {
        if !kb.is_frozen() {
            return Err(HarnessError::KbNotFrozen);
        }
        config.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Ok(Pipeline { config, provider, kb, work_dir: work_dir.into(), config_digest: config.digest() })
    }

    pub fn config(&self) -> &RunConfig {
        self.config
    }

    pub fn detect_entry(&self, entry: &ManifestEntry) -> Result<VerdictRecord, HarnessError> {
        let mut record = self.detect(&entry.id, &entry.source)?;
        record.true_label = Some(entry.label);
        record.generator = entry.generator.clone();
        Ok(record)
    }

    /// Runs all four stages on one video.
    pub fn detect(&self, video_id: &str, source: &Path) -> Result<VerdictRecord, HarnessError> {
        let started = Instant::now();
        let cfg = self.config;
        let clip = evidence::load_clip(video_id, source, cfg.fps, cfg.extractor.as_deref(), &self.work_dir)?;
        let mut session =
            Session::new(video_id, self.provider, cfg.retry_policy()).with_max_output_tokens(cfg.max_output_tokens);

        let scene = evidence::observe_scene(&mut session, &clip, cfg.parse_retries)?;
        let (traces, _) = evidence::discover_traces(&mut session, &clip, &scene, self.kb, &cfg.discovery())?;

        let retrieve = |desc: &str, ctx: &str| {
            if cfg.enable_kb {
                self.kb.retrieve(desc, ctx, cfg.k_pos, cfg.k_neg)
            } else {
                RetrievalResult::default()
            }
        };

        let debate_cfg = cfg.debate();
        let mut debates = Vec::with_capacity(traces.len());
        for trace in &traces {
            let kb = retrieve(&trace.description, &scene.summary);
            let record = if cfg.enable_debate {
                debate::run_debate(&mut session, trace, &kb, &scene.summary, &debate_cfg)?
            } else {
                let openings = debate::open_debate(&mut session, trace, &kb, &scene.summary, &debate_cfg)?;
                debate::opening_only_record(trace, &kb, openings)
            };
            debates.push(record);
        }

        let part = adjudication::partition(&debates);
        let mut compressions = BTreeMap::new();
        let evidence = if cfg.enable_cost {
            for &i in &part.unresolved {
                let (trace, rec) = (&traces[i], &debates[i]);
                let ctx = format!("{}\n{}", rec.hypothesis_gen.statement, rec.hypothesis_nat.statement);
                let priors = retrieve(&trace.description, &ctx);
                let pair = adjudication::compress_pair(&mut session, trace, rec, &priors, cfg.length_mode)?;
                compressions.insert(rec.trace_id.clone(), pair);
            }
            adjudication::build_evidence_set(&debates, &part, &compressions)?
        } else {
            adjudication::evidence_without_cost(&debates, &part)
        };

        let (verdict, disagreement, fallback) = if traces.is_empty() {
            (reference_aggregate(&evidence, cfg.dead_band), false, false)
        } else {
            let o = llm_arbitrate(
                &mut session,
                &evidence,
                &debates,
                Some(clip.key_frame()),
                cfg.arbiter_mode,
                cfg.dead_band,
            )?;
            (o.verdict, o.disagreement, o.fallback)
        };

        let compressions = debates
            .iter()
            .filter_map(|d| compressions.remove(&d.trace_id))
            .collect();
        Ok(VerdictRecord {
            entry_id: video_id.to_string(),
            true_label: None,
            generator: None,
            verdict,
            arbiter_disagreement: disagreement,
            arbiter_fallback: fallback,
            frame_count: clip.frame_count(),
            key_frame_index: clip.key_frame_index,
            scene,
            traces,
            debates,
            compressions,
            evidence,
            usage: session.into_ledger(),
            wall_time_ms: cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64),
            config_digest: self.config_digest.clone(),
            kb_version: self.kb.version().to_string(),
        })
    }

    /// Runs every entry with bounded parallelism and writes
    /// `<out>/report/{summary.json, records/, errors.jsonl}`. Failed entries
    /// are logged and excluded from the metrics.
    pub fn run_benchmark(
        &self,
        entries: &[ManifestEntry],
        out_dir: &Path,
        diagnose: bool,
    ) -> Result<RunSummary, HarnessError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        let kb_version = self.kb.version().to_string();
        let results: Vec<Result<VerdictRecord, HarnessError>> =
            pool.install(|| entries.par_iter().map(|e| self.detect_entry(e)).collect());
        if self.kb.version() != kb_version {
            return Err(HarnessError::Invalid("knowledge base changed during the run".into()));
        }

        let report = out_dir.join("report");
        let records_dir = report.join("records");
        if records_dir.exists() {
            fs::remove_dir_all(&records_dir).map_err(io_err(&records_dir))?;
        }
        fs::create_dir_all(&records_dir).map_err(io_err(&records_dir))?;

        let mut records = Vec::new();
        let mut errors = String::new();
        for (entry, result) in entries.iter().zip(results) {
            match result {
                Ok(r) => {
                    let path = records_dir.join(format!("{}.json", r.entry_id));
                    fs::write(&path, r.to_json() + "\n").map_err(io_err(&path))?;
                    records.push(r);
                }
                Err(e) => {
                    tracing::error!(entry = %entry.id, error = %e, "entry excluded");
                    errors.push_str(&json!({"entry_id": entry.id, "error": e.to_string()}).to_string());
                    errors.push('\n');
                }
            }
        }
        let errors_path = report.join("errors.jsonl");
        fs::write(&errors_path, errors).map_err(io_err(&errors_path))?;

        let mut ledger = UsageLedger::default();
        for r in &records {
            ledger.merge(&r.usage);
        }

        let kb_candidates = if diagnose {
            let mut candidates = Vec::new();
            for r in &records {
                let truth = r.true_label.expect("manifest entries carry labels");
                if r.verdict.label == truth {
                    continue;
                }
                let mut session = Session::new(format!("diagnose/{}", r.entry_id), self.provider, self.config.retry_policy())
                    .with_max_output_tokens(self.config.max_output_tokens);
                candidates.extend(knowledge::reactive_diagnose(&mut session, r, truth, Utc::now()));
                ledger.merge(session.ledger());
            }
            let path = report.join("kb_candidates.jsonl");
            knowledge::write_candidates(&path, &candidates).map_err(io_err(&path))?;
            Some(candidates.len())
        } else {
            None
        };

        let predictions: Vec<Label> = records.iter().map(|r| r.verdict.label).collect();
        let truths: Vec<Label> = records.iter().map(|r| r.true_label.expect("labelled")).collect();
        let metrics = if records.is_empty() { None } else { Some(compute_metrics(&predictions, &truths)?) };
        let outcomes = records
            .iter()
            .map(|r| EntryOutcome {
                entry_id: r.entry_id.clone(),
                label: r.true_label.expect("labelled"),
                predicted: r.verdict.label,
                confidence: r.verdict.confidence,
                arbiter_disagreement: r.arbiter_disagreement,
                arbiter_fallback: r.arbiter_fallback,
            })
            .collect();
        let summary = RunSummary {
            entries: entries.len(),
            succeeded: records.len(),
            excluded: entries.len() - records.len(),
            metrics,
            tokens: token_table(&ledger, records.len()),
            config_digest: self.config_digest.clone(),
            kb_version,
            arbiter_disagreements: records.iter().filter(|r| r.arbiter_disagreement).count(),
            arbiter_fallbacks: records.iter().filter(|r| r.arbiter_fallback).count(),
            kb_candidates,
            outcomes,
        };
        write_summary(&report, &summary)?;
        Ok(summary)
    }
}

fn write_summary(report: &Path, summary: &RunSummary) -> Result<(), HarnessError> {
    let path = report.join("summary.json");
    let v = serde_json::to_value(summary).expect("summary serializes");
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&v).expect("value serializes")).map_err(io_err(&path))?;
    Ok(())
}

/// Reads `<run_dir>/report/summary.json` (or `<run_dir>/summary.json`).
pub fn load_summary(run_dir: &Path) -> Result<RunSummary, HarnessError> {
    let nested = run_dir.join("report").join("summary.json");
    let path = if nested.is_file() { nested } else { run_dir.join("summary.json") };
    let raw = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&raw).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
}

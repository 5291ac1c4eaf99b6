//! A small labelled corpus with a scripted provider, for offline runs and
//! regression tests.
//!
//! Six two-second clips, each with a hand-written provider script that
//! drives every branch of the pipeline: concessions from either agent, an
//! unanswered challenge, unresolved traces settled by cost gaps, a clip
//! without anomalies and one arbiter disagreement.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde_json::json;

use crate::backend::{request_digest, BackendError, ChatProvider, ChatRequest, Completion, RecordingProvider};
use crate::config::{Ablation, ProviderConfig, RunConfig};
use crate::domain::Label;
use crate::harness::{ManifestEntry, Pipeline};
use crate::knowledge::{GuidanceType, KbCandidate, KbIndex, Provenance};

/// How the debate over one trace plays out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plan {
    /// GHA concedes in its round-1 response: authentic vote.
    GhaConcedes,
    /// NMA concedes in its round-1 response: synthetic vote.
    NmaConcedes,
    /// NMA keeps its position but leaves the rebuttal empty: synthetic vote.
    NmaEmptyRebuttal,
    /// Both sides hold for every round; the cost gap decides.
    Unresolved { gap: i64 },
}

#[derive(Debug, Clone)]
pub struct TraceScript {
    pub description: &'static str,
    pub category: &'static str,
    pub frames: &'static [usize],
    pub plan: Plan,
}

#[derive(Debug, Clone)]
pub struct VideoScript {
    pub id: &'static str,
    pub label: Label,
    pub generator: Option<&'static str>,
    pub summary: &'static str,
    pub traces: Vec<TraceScript>,
    /// Label the arbiter proposes; `None` means it follows the evidence.
    pub arbiter_label: Option<Label>,
}

pub const CLIP_SECONDS: f64 = 2.0;
pub const CLIP_FPS: f64 = 5.0;
const BASE_WORDS: i64 = 18;

pub fn golden_scripts() -> Vec<VideoScript> {
    vec![
        VideoScript {
            id: "real_sunset",
            label: Label::Real,
            generator: None,
            summary: "A handheld shot of a sunset over a harbour with moving boats.",
            traces: vec![TraceScript {
                description: "Lens flare drifts across the sun between frames as the camera sways.",
                category: "lighting",
                frames: &[2, 3, 4],
                plan: Plan::GhaConcedes,
            }],
            arbiter_label: None,
        },
        VideoScript {
            id: "fake_grass",
            label: Label::Fake,
            generator: Some("gen-a"),
            summary: "A dog runs across a lawn toward the camera.",
            traces: vec![
                TraceScript {
                    description: "Grass blades repeat in an identical tile pattern behind the dog.",
                    category: "texture",
                    frames: &[1, 5],
                    plan: Plan::Unresolved { gap: 12 },
                },
                TraceScript {
                    description: "The dog's shadow lags its body by several frames.",
                    category: "temporal",
                    frames: &[4, 5, 6],
                    plan: Plan::Unresolved { gap: 9 },
                },
            ],
            arbiter_label: None,
        },
        VideoScript {
            id: "real_empty",
            label: Label::Real,
            generator: None,
            summary: "A static shot of a bookshelf in a quiet room.",
            traces: vec![],
            arbiter_label: None,
        },
        VideoScript {
            id: "fake_hand",
            label: Label::Fake,
            generator: Some("gen-b"),
            summary: "A close-up of a hand pouring coffee into a mug.",
            traces: vec![TraceScript {
                description: "The hand shows six fingers while gripping the kettle handle.",
                category: "geometry",
                frames: &[3],
                plan: Plan::NmaConcedes,
            }],
            arbiter_label: None,
        },
        VideoScript {
            id: "real_pan",
            label: Label::Real,
            generator: None,
            summary: "A slow pan across a city street at dusk with pedestrians.",
            traces: vec![
                TraceScript {
                    description: "A pedestrian's legs blur and merge mid-stride.",
                    category: "temporal",
                    frames: &[6, 7],
                    plan: Plan::NmaEmptyRebuttal,
                },
                TraceScript {
                    description: "Shop sign lettering is illegible and changes shape between frames.",
                    category: "texture",
                    frames: &[2, 8],
                    plan: Plan::Unresolved { gap: 5 },
                },
            ],
            arbiter_label: Some(Label::Real),
        },
        VideoScript {
            id: "fake_mixed",
            label: Label::Fake,
            generator: Some("gen-a"),
            summary: "A woman waves from a balcony while curtains move in the wind.",
            traces: vec![
                TraceScript {
                    description: "Curtain folds flicker in brightness as clouds pass.",
                    category: "lighting",
                    frames: &[0, 1],
                    plan: Plan::GhaConcedes,
                },
                TraceScript {
                    description: "Balcony railing bars bend where the arm passes in front of them.",
                    category: "geometry",
                    frames: &[4, 5],
                    plan: Plan::Unresolved { gap: 7 },
                },
                TraceScript {
                    description: "Earring disappears and reappears between consecutive frames.",
                    category: "temporal",
                    frames: &[7, 8, 9],
                    plan: Plan::NmaConcedes,
                },
            ],
            arbiter_label: None,
        },
    ]
}

fn words(n: i64, word: &str) -> String {
    vec![word; n.max(1) as usize].join(" ")
}

fn turn(status: &str, argument: &str, challenge: &str, rebuttal: &str) -> String {
    json!({
        "status": status,
        "argument": argument,
        "challenge": challenge,
        "rebuttal": rebuttal,
        "assumptions": [],
    })
    .to_string()
}

/// Provider replies keyed by `(session id, step label)`.
#[derive(Debug, Clone, Default)]
pub struct Playbook {
    replies: BTreeMap<(String, String), String>,
}

impl Playbook {
    pub fn insert(&mut self, session: &str, label: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert((session.to_string(), label.into()), reply.into());
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn from_scripts(scripts: &[VideoScript]) -> Self {
        let mut pb = Playbook::default();
        for v in scripts {
            let s = v.id;
            pb.insert(
                s,
                "scene",
                json!({
                    "summary": v.summary,
                    "environment": "outdoor or indoor everyday scene",
                    "objects": [],
                    "interactions": [],
                })
                .to_string(),
            );
            let traces = if v.traces.is_empty() {
                json!({"no_anomalies": true})
            } else {
                json!({"traces": v.traces.iter().map(|t| json!({
                    "description": t.description,
                    "category": t.category,
                    "frame_indices": t.frames,
                })).collect::<Vec<_>>()})
            };
            pb.insert(s, "traces", traces.to_string());

            let mut signs = Vec::new();
            for (i, t) in v.traces.iter().enumerate() {
                let id = format!("t{}", i + 1);
                pb.insert(
                    s,
                    format!("open/{id}/gha"),
                    json!({"statement": format!("The anomaly in {id} of {s} is a synthesis artefact."), "assumptions": ["generator lacks temporal memory"]}).to_string(),
                );
                pb.insert(
                    s,
                    format!("open/{id}/nma"),
                    json!({"statement": format!("The anomaly in {id} of {s} follows from optics and motion."), "assumptions": ["ordinary camera capture"]}).to_string(),
                );
                let turn_label = |r: u32, who: &str| format!("turn/{id}/r{r}/{who}");
                let challenge = turn("maintain", "The pattern violates physical continuity.", "Explain why the structure breaks between frames.", "");
                let nat_challenge = turn("maintain", "Camera motion accounts for the change.", "Show any frame where the physics is actually violated.", "");
                let response = turn("maintain", "Position holds.", "", "The objection does not match the observed frames.");
                match t.plan {
                    Plan::GhaConcedes => {
                        pb.insert(s, turn_label(1, "gha-challenge"), &challenge);
                        pb.insert(s, turn_label(1, "nma-response"), &response);
                        pb.insert(s, turn_label(1, "nma-challenge"), &nat_challenge);
                        pb.insert(s, turn_label(1, "gha-response"), turn("concede", "", "", "The natural explanation covers every frame."));
                        signs.push(-1);
                    }
                    Plan::NmaConcedes => {
                        pb.insert(s, turn_label(1, "gha-challenge"), &challenge);
                        pb.insert(s, turn_label(1, "nma-response"), turn("concede", "", "", "No capture process produces this."));
                        signs.push(1);
                    }
                    Plan::NmaEmptyRebuttal => {
                        pb.insert(s, turn_label(1, "gha-challenge"), &challenge);
                        pb.insert(s, turn_label(1, "nma-response"), turn("maintain", "Still natural.", "", ""));
                        signs.push(1);
                    }
                    Plan::Unresolved { gap } => {
                        for r in 1..=2 {
                            pb.insert(s, turn_label(r, "gha-challenge"), &challenge);
                            pb.insert(s, turn_label(r, "nma-response"), &response);
                            pb.insert(s, turn_label(r, "nma-challenge"), &nat_challenge);
                            pb.insert(s, turn_label(r, "gha-response"), &response);
                        }
                        signs.push(gap.signum() as i8);
                    }
                }
                // Every trace gets compressions: with the debate disabled all
                // traces reach cost adjudication.
                let gap = match t.plan {
                    Plan::Unresolved { gap } => gap,
                    Plan::GhaConcedes => -4,
                    Plan::NmaConcedes | Plan::NmaEmptyRebuttal => 4,
                };
                pb.insert(s, format!("compress/{id}/gen"), words(BASE_WORDS, "gen"));
                pb.insert(s, format!("compress/{id}/nat"), words(BASE_WORDS + gap, "nat"));
            }
            if !v.traces.is_empty() {
                let score: i64 = signs.iter().map(|&x| i64::from(x)).sum();
                let reference = if score > 0 { Label::Fake } else { Label::Real };
                let label = v.arbiter_label.unwrap_or(reference);
                let want = if label == Label::Fake { 1 } else { -1 };
                let ids: Vec<String> = signs
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x == want)
                    .map(|(i, _)| format!("t{}", i + 1))
                    .collect();
                pb.insert(
                    s,
                    "arbiter",
                    json!({
                        "label": label.as_str(),
                        "confidence": 0.8,
                        "supporting_trace_ids": ids,
                        "rationale": format!("Weighing {} signal(s), the evidence points to {}.", signs.len(), label),
                    })
                    .to_string(),
                );
            }
            pb.insert(
                &format!("diagnose/{s}"),
                "diagnose",
                json!({"entries": [{
                    "phenomenon": "motion blur merging limbs",
                    "description": "Fast limb motion under low light blurs legs together in real footage; do not treat it as a generation artefact.",
                    "guidance_type": "negative",
                }]})
                .to_string(),
            );
        }
        pb
    }
}

impl ChatProvider for Playbook {
    fn id(&self) -> &str {
        "playbook"
    }

    fn send(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let label = request.label.split("/retry").next().unwrap_or(&request.label);
        self.replies
            .get(&(request.session_id.clone(), label.to_string()))
            .map(|t| Completion::text(t.clone()))
            .ok_or_else(|| BackendError::ScriptMiss {
                digest: request_digest(request.stage, &request.messages),
                stage: request.stage.as_str().to_string(),
            })
    }
}

pub fn fixed_time() -> DateTime<Utc> {
    DateTime::parse_from_rfc3339("2025-01-01T00:00:00Z").expect("valid timestamp").with_timezone(&Utc)
}

pub fn golden_kb_candidates() -> Vec<KbCandidate> {
    let c = |phenomenon: &str, description: &str, guidance_type| KbCandidate {
        phenomenon: phenomenon.into(),
        description: description.into(),
        guidance_type,
        provenance: Provenance::Proactive,
        verified: true,
        created_at: fixed_time(),
    };
    vec![
        c(
            "repeating texture tiles",
            "Natural surfaces such as grass or foliage rarely repeat exactly; identical tiles suggest synthesis.",
            GuidanceType::Positive,
        ),
        c(
            "extra or missing fingers",
            "Hands with the wrong number of fingers are a frequent generation failure.",
            GuidanceType::Positive,
        ),
        c(
            "lens flare motion",
            "Lens flares move with the camera and change shape with small handheld motion in real footage.",
            GuidanceType::Negative,
        ),
        c(
            "illumination flicker from clouds",
            "Passing clouds change scene brightness smoothly; flicker alone does not indicate generation.",
            GuidanceType::Negative,
        ),
    ]
}

pub fn golden_kb() -> KbIndex {
    let mut kb = KbIndex::default();
    for c in golden_kb_candidates() {
        kb.add_entry(c).expect("golden knowledge entries are distinct");
    }
    kb.freeze().expect("fresh index");
    kb
}

fn write_clip(dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("meta.json"),
        json!({"duration_seconds": CLIP_SECONDS, "fps": CLIP_FPS}).to_string() + "\n",
    )?;
    let n = crate::domain::frame_count(CLIP_SECONDS, CLIP_FPS);
    for i in 0..n {
        fs::write(dir.join(format!("frame_{i:06}.png")), b"")?;
    }
    Ok(())
}

/// Config used for offline runs over the golden corpus.
pub fn golden_config() -> RunConfig {
    RunConfig {
        parallelism: 2,
        record_wall_time: false,
        kb_path: Some("kb.jsonl".into()),
        provider: ProviderConfig { fixture: Some("fixture.jsonl".into()), backoff_ms: 0, ..Default::default() },
        ..Default::default()
    }
}

/// Writes the corpus to `dir`: frame directories under `videos/`,
/// `manifest.jsonl`, a frozen `kb.jsonl`, the recorded `fixture.jsonl`
/// and `scripted.toml`. The fixture covers every rung of the ablation
/// ladder.
pub fn write_golden_corpus(dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let scripts = golden_scripts();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut entries = Vec::new();
    for v in &scripts {
        let rel = format!("videos/{}", v.id);
        write_clip(&dir.join(&rel))?;
        let e = ManifestEntry {
            id: v.id.to_string(),
            source: rel.into(),
            label: v.label,
            generator: v.generator.map(str::to_string),
        };
        manifest.push_str(&serde_json::to_string(&e)?);
        manifest.push('\n');
        entries.push(ManifestEntry { source: dir.join(&e.source), ..e });
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;

    let kb = golden_kb();
    kb.save(&dir.join("kb.jsonl"))?;

    let config = golden_config();
    fs::write(dir.join("scripted.toml"), toml::to_string(&config)?)?;

    let recorder = RecordingProvider::new(Playbook::from_scripts(&scripts));
    let mut run_config = config.clone();
    run_config.resolve_paths(dir);
    let scratch = tempfile_dir(dir)?;
    for ablation in Ablation::LADDER {
        let mut c = run_config.clone();
        ablation.apply(&mut c);
        let pipeline = Pipeline::new(&c, &recorder, &kb, scratch.join("frames"))?;
        let summary = pipeline.run_benchmark(&entries, &scratch, true)?;
        if summary.excluded > 0 {
            return Err(format!("golden run under {ablation:?} excluded {} entries", summary.excluded).into());
        }
    }
    fs::remove_dir_all(&scratch)?;

    let mut records = recorder.records();
    records.sort_by(|a, b| (a.stage, &a.digest).cmp(&(b.stage, &b.digest)));
    let mut out = String::new();
    for r in &records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(dir.join("fixture.jsonl"), out)?;
    Ok(())
}

fn tempfile_dir(dir: &Path) -> io::Result<std::path::PathBuf> {
    let p = dir.join(".scratch");
    if p.exists() {
        fs::remove_dir_all(&p)?;
    }
    fs::create_dir_all(&p)?;
    Ok(p)
}

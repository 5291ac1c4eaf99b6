//! Acceptance suite. Each criterion runs against an independent oracle and
//! a runtime budget, and prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvar_core::adjudication::{self, description_length, CompressedPair, Explanation};
use dvar_core::arbiter::reference_aggregate;
use dvar_core::backend::{hash_embed, FnProvider, RetryPolicy, Session, Stage, StageUsage, UsageLedger};
use dvar_core::config::{Ablation, RunConfig};
use dvar_core::debate::{run_debate, Agent, DebateConfig, DebateOutcome, DebateRecord, LossReason};
use dvar_core::domain::{EvidenceSet, EvidenceSignal, Hypothesis, Label, Stance, Trace, TraceCategory};
use dvar_core::evidence::sample_frames;
use dvar_core::harness::{compute_metrics, load_kb, load_manifest, stratified_subset, token_table, ManifestEntry, Pipeline};
use dvar_core::knowledge::{GuidanceType, KbCandidate, KbEntry, KbError, KbIndex, Provenance, RetrievalResult};
use dvar_core::testkit;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1 ------------------------------------------------------------------------

fn sampling_law() -> Result<String, String> {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let s: f64 = r.random_range(0.01..120.0);
        let n: f64 = r.random_range(0.1..60.0);
        let ts = sample_frames(s, n).map_err(|e| e.to_string())?;
        let expected = ((n * s).floor() as usize).max(1);
        ensure(ts.len() == expected, || format!("S={s} n={n}: {} frames, expected {expected}", ts.len()))?;
        ensure(ts.iter().all(|&t| (0.0..s).contains(&t)), || format!("S={s} n={n}: timestamp outside [0, S)"))?;
        ensure(ts.windows(2).all(|w| w[0] < w[1]), || format!("S={s} n={n}: timestamps not increasing"))?;
    }
    let ts = sample_frames(10.0, 5.0).map_err(|e| e.to_string())?;
    ensure(ts.len() == 50, || format!("10 s at 5 fps gave {} frames", ts.len()))?;
    Ok("10000 random (S, n) pairs; 10 s at 5 fps = 50 frames".into())
}

// 2 ------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    Maintain,
    Concede,
    Fail,
}

const ACTS: [Act; 3] = [Act::Maintain, Act::Concede, Act::Fail];
const SLOT_AGENTS: [Agent; 4] = [Agent::Gha, Agent::Nma, Agent::Nma, Agent::Gha];
const SLOT_NAMES: [&str; 4] = ["gha-challenge", "nma-response", "nma-challenge", "gha-response"];

#[derive(Debug, PartialEq, Eq)]
struct Expected {
    outcome: DebateOutcome,
    rounds_used: u32,
    turns: usize,
    termination: Option<(Agent, LossReason)>,
}

/// Brute-force reading of the termination rules.
fn interpret(schedule: &[Act], rounds: u32) -> Expected {
    for (i, act) in schedule.iter().enumerate() {
        let agent = SLOT_AGENTS[i % 4];
        let round = (i / 4) as u32 + 1;
        let vote = if agent == Agent::Gha { -1 } else { 1 };
        match act {
            Act::Maintain => {}
            Act::Concede => {
                return Expected {
                    outcome: DebateOutcome::Resolved { value: vote },
                    rounds_used: round,
                    turns: i + 1,
                    termination: Some((agent, LossReason::Conceded)),
                }
            }
            Act::Fail => {
                return Expected {
                    outcome: DebateOutcome::Resolved { value: vote },
                    rounds_used: round,
                    turns: i,
                    termination: Some((agent, LossReason::SchemaFailure)),
                }
            }
        }
    }
    Expected { outcome: DebateOutcome::Unresolved, rounds_used: rounds, turns: 4 * rounds as usize, termination: None }
}

fn reply_for(label: &str, schedule: &[Act]) -> String {
    if label.starts_with("open/") {
        return r#"{"statement":"opening hypothesis","assumptions":["a"]}"#.into();
    }
    let label = label.split("/retry").next().unwrap();
    let parts: Vec<&str> = label.split('/').collect();
    let round: usize = parts[2][1..].parse().unwrap();
    let slot = SLOT_NAMES.iter().position(|n| *n == parts[3]).unwrap();
    let challenge = slot == 0 || slot == 2;
    match schedule[(round - 1) * 4 + slot] {
        Act::Fail => "no structured reply".into(),
        Act::Concede => r#"{"status":"concede","argument":"","challenge":"","rebuttal":"conceded","assumptions":[]}"#.into(),
        Act::Maintain if challenge => {
            r#"{"status":"maintain","argument":"holds","challenge":"explain frame 3","rebuttal":"","assumptions":[]}"#.into()
        }
        Act::Maintain => {
            r#"{"status":"maintain","argument":"holds","challenge":"","rebuttal":"frame 3 is consistent","assumptions":[]}"#.into()
        }
    }
}

fn trace() -> Trace {
    Trace { trace_id: "t1".into(), description: "flicker".into(), category: TraceCategory::Lighting, frame_indices: vec![0] }
}

fn debate_state_machine() -> Result<String, String> {
    let mut checked = 0usize;
    for rounds in 1..=2u32 {
        let slots = 4 * rounds as usize;
        for code in 0..3usize.pow(slots as u32) {
            let schedule: Vec<Act> = (0..slots).map(|i| ACTS[(code / 3usize.pow(i as u32)) % 3]).collect();
            let sched = schedule.clone();
            let provider = FnProvider::new("enum", move |req| Ok(reply_for(&req.label, &sched)));
            let mut session = Session::new("v", &provider, RetryPolicy { max_retries: 0, backoff: Duration::ZERO });
            let config = DebateConfig { max_rounds: rounds, parse_retries: 1, temperature: 0.0 };
            let record = run_debate(&mut session, &trace(), &RetrievalResult::default(), "scene", &config)
                .map_err(|e| e.to_string())?;
            let got = Expected {
                outcome: record.outcome,
                rounds_used: record.rounds_used,
                turns: record.turns.len(),
                termination: record.termination.as_ref().map(|t| (t.loser, t.reason)),
            };
            let want = interpret(&schedule, rounds);
            ensure(got == want, || format!("schedule {schedule:?}: got {got:?}, expected {want:?}"))?;
            checked += 1;
        }
    }
    // Opening failures end the debate before any turn; GHA is checked first.
    for (gha_ok, nma_ok, want) in [(false, true, -1i8), (true, false, 1), (false, false, -1)] {
        let provider = FnProvider::new("open", move |req| {
            Ok(match req.label.split("/retry").next().unwrap() {
                "open/t1/gha" if !gha_ok => "x".into(),
                "open/t1/nma" if !nma_ok => "x".into(),
                l => reply_for(l, &[Act::Maintain; 8]),
            })
        });
        let mut session = Session::new("v", &provider, RetryPolicy::default());
        let record = run_debate(&mut session, &trace(), &RetrievalResult::default(), "scene", &DebateConfig::default())
            .map_err(|e| e.to_string())?;
        ensure(record.outcome == DebateOutcome::Resolved { value: want } && record.rounds_used == 0, || {
            format!("opening failure ({gha_ok}, {nma_ok}) gave {:?}", record.outcome)
        })?;
    }
    Ok(format!("{checked} schedules (3^4 + 3^8) match the interpreter; opening failures"))
}

// 3 ------------------------------------------------------------------------

fn random_text(r: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = r.random_range(0..=max_words);
    let mut s = String::new();
    for _ in 0..n {
        let ws = [" ", "  ", "\t", "\n", " \u{00a0}"];
        s.push_str(ws[r.random_range(0..ws.len())]);
        let len = r.random_range(1..8);
        s.extend((0..len).map(|_| r.random_range(b'a'..=b'z') as char));
    }
    if r.random_bool(0.5) {
        s.push('\n');
    }
    s
}

fn words_in(s: &str) -> u64 {
    // Oracle: count transitions into non-whitespace.
    let mut count = 0;
    let mut inside = false;
    for c in s.chars() {
        if c.is_whitespace() {
            inside = false;
        } else if !inside {
            inside = true;
            count += 1;
        }
    }
    count
}

fn explanation(stance: Stance, text: String) -> Explanation {
    let length = description_length(&text);
    Explanation { stance, text, length }
}

fn pair(id: &str, nat: String, gen: String) -> CompressedPair {
    CompressedPair {
        trace_id: id.into(),
        nat: explanation(Stance::Nat, nat),
        gen: explanation(Stance::Gen, gen),
        template_id: "c".into(),
        priors_digest: String::new(),
    }
}

fn debate_record(id: String, outcome: DebateOutcome) -> DebateRecord {
    let h = |stance| Hypothesis { stance, statement: "h".into(), assumptions: vec![] };
    DebateRecord {
        trace_id: id,
        turns: vec![],
        outcome,
        hypothesis_gen: h(Stance::Gen),
        hypothesis_nat: h(Stance::Nat),
        rounds_used: 1,
        kb_context_digest: String::new(),
        template_id: String::new(),
        termination: None,
    }
}

fn cost_calculus() -> Result<String, String> {
    let mut r = rng(3);
    ensure(description_length("") == 0, || "description_length(\"\") != 0".into())?;
    for _ in 0..1000 {
        let a = random_text(&mut r, 40);
        let b = random_text(&mut r, 40);
        ensure(description_length(&a) == words_in(&a), || format!("length mismatch on {a:?}"))?;
        let fwd = pair("t", a.clone(), b.clone()).cost_gap();
        let rev = pair("t", b.clone(), a.clone()).cost_gap();
        ensure(fwd == -rev, || format!("swap not antisymmetric: {fwd} vs {rev}"))?;
        ensure(fwd == words_in(&a) as i64 - words_in(&b) as i64, || "gap differs from oracle".into())?;
        let collapsed = a.split_whitespace().collect::<Vec<_>>().join(" ");
        ensure(description_length(&collapsed) == description_length(&a), || format!("collapse changed length of {a:?}"))?;
    }
    for _ in 0..1000 {
        let m = r.random_range(0..12);
        let records: Vec<DebateRecord> = (0..m)
            .map(|i| {
                let outcome = match r.random_range(0..3) {
                    0 => DebateOutcome::Resolved { value: -1 },
                    1 => DebateOutcome::Resolved { value: 1 },
                    _ => DebateOutcome::Unresolved,
                };
                debate_record(format!("t{}", i + 1), outcome)
            })
            .collect();
        let part = adjudication::partition(&records);
        let comps: BTreeMap<String, CompressedPair> = part
            .unresolved
            .iter()
            .map(|&i| {
                let id = records[i].trace_id.clone();
                (id.clone(), pair(&id, random_text(&mut r, 20), random_text(&mut r, 20)))
            })
            .collect();
        let set = adjudication::build_evidence_set(&records, &part, &comps).map_err(|e| e.to_string())?;
        ensure(set.len() == m, || format!("|EvidenceSet| = {} for M = {m}", set.len()))?;
        ensure(set.signals.iter().zip(&records).all(|(s, rec)| s.trace_id == rec.trace_id), || "evidence order differs".into())?;
        ensure(adjudication::evidence_without_cost(&records, &part).len() == m, || "cost-free evidence size".into())?;
    }
    Ok("1000 swap pairs, whitespace collapse, 1000 random record sets".into())
}

// 4 ------------------------------------------------------------------------

/// Oracle: vote counting without sign arithmetic.
fn brute_aggregate(signals: &[EvidenceSignal]) -> (Label, f64, Vec<String>) {
    let votes: Vec<Option<bool>> = signals
        .iter()
        .map(|s| match (s.resolved_value, s.cost_gap) {
            (Some(v), _) => Some(v > 0),
            (None, Some(g)) if g > 0 => Some(true),
            (None, Some(g)) if g < 0 => Some(false),
            _ => None,
        })
        .collect();
    let fake = votes.iter().filter(|v| **v == Some(true)).count();
    let real = votes.iter().filter(|v| **v == Some(false)).count();
    if signals.is_empty() {
        return (Label::Real, 0.5, vec![]);
    }
    let label = if fake > real { Label::Fake } else { Label::Real };
    let side = label == Label::Fake;
    let agree = if side { fake } else { real };
    let mut conf = agree as f64 / signals.len() as f64;
    if fake == real {
        conf = conf.max(0.5);
    }
    let ids = signals
        .iter()
        .zip(&votes)
        .filter(|(_, v)| **v == Some(side))
        .map(|(s, _)| s.trace_id.clone())
        .collect();
    (label, conf, ids)
}

fn option_signal(i: usize, option: usize) -> EvidenceSignal {
    let id = format!("s{i}");
    match option {
        0 => EvidenceSignal::resolved(id, -1),
        1 => EvidenceSignal::resolved(id, 1),
        2 => EvidenceSignal::unresolved(id, -2),
        3 => EvidenceSignal::unresolved(id, 0),
        _ => EvidenceSignal::unresolved(id, 2),
    }
}

fn reference_aggregation() -> Result<String, String> {
    let mut sets = 0;
    for len in 0..=4u32 {
        for code in 0..5usize.pow(len) {
            let signals: Vec<EvidenceSignal> =
                (0..len as usize).map(|i| option_signal(i, (code / 5usize.pow(i as u32)) % 5)).collect();
            let v = reference_aggregate(&EvidenceSet { signals: signals.clone() }, 0);
            let (label, conf, ids) = brute_aggregate(&signals);
            ensure(v.label == label && v.confidence == conf && v.supporting_trace_ids == ids, || {
                format!("{signals:?}: got ({}, {}, {:?}), expected ({label}, {conf}, {ids:?})", v.label, v.confidence, v.supporting_trace_ids)
            })?;
            sets += 1;
        }
    }
    let empty = reference_aggregate(&EvidenceSet::default(), 0);
    ensure((empty.label, empty.confidence) == (Label::Real, 0.5), || "empty set is not (real, 0.5)".into())?;

    let mut r = rng(4);
    for _ in 0..10_000 {
        let n = r.random_range(0..10);
        let mut signals: Vec<EvidenceSignal> = (0..n)
            .map(|i| {
                if r.random_bool(0.5) {
                    EvidenceSignal::resolved(format!("s{i}"), if r.random_bool(0.5) { 1 } else { -1 })
                } else {
                    EvidenceSignal::unresolved(format!("s{i}"), r.random_range(-50..=50))
                }
            })
            .collect();
        let base = reference_aggregate(&EvidenceSet { signals: signals.clone() }, 0);
        let mut shuffled = signals.clone();
        shuffled.shuffle(&mut r);
        let perm = reference_aggregate(&EvidenceSet { signals: shuffled }, 0);
        let mut a = base.supporting_trace_ids.clone();
        let mut b = perm.supporting_trace_ids.clone();
        a.sort();
        b.sort();
        ensure(perm.label == base.label && perm.confidence == base.confidence && a == b, || {
            format!("permutation changed the verdict for {signals:?}")
        })?;
        if n > 0 && base.label == Label::Fake {
            let i = r.random_range(0..n);
            signals[i] = if r.random_bool(0.5) {
                EvidenceSignal::resolved(signals[i].trace_id.clone(), 1)
            } else {
                EvidenceSignal::unresolved(signals[i].trace_id.clone(), r.random_range(1..100))
            };
            let up = reference_aggregate(&EvidenceSet { signals: signals.clone() }, 0);
            ensure(up.label == Label::Fake, || format!("raising a signal flipped fake to real: {signals:?}"))?;
        }
    }
    Ok(format!("{sets} exhaustive sets; 10000 random sets for permutation and monotonicity"))
}

// 5 ------------------------------------------------------------------------

const VOCAB: &[&str] = &[
    "blur", "hand", "finger", "shadow", "light", "texture", "grass", "water", "reflection", "edge", "motion", "face",
    "eye", "teeth", "hair", "cloth", "fold", "wind", "smoke", "fire", "glass", "mirror", "text", "sign", "wheel",
    "car", "road", "tree", "leaf", "sky", "cloud", "sun", "lamp", "flicker", "jitter", "warp", "melt", "merge",
    "split", "vanish", "appear", "repeat", "tile", "noise", "grain", "compression", "artifact", "lens", "flare",
    "focus", "depth", "perspective", "scale", "gravity", "collision", "contact", "physics", "temporal", "frame",
    "static", "camera", "pan", "zoom", "rolling", "shutter", "exposure", "color", "saturation", "skin", "pore",
];

fn random_phrase(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = r.random_range(lo..=hi);
    (0..n).map(|_| VOCAB[r.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

fn candidate(phenomenon: String, description: String, guidance_type: GuidanceType) -> KbCandidate {
    KbCandidate {
        phenomenon,
        description,
        guidance_type,
        provenance: Provenance::Proactive,
        verified: true,
        created_at: testkit::fixed_time(),
    }
}

fn oracle_top(entries: &[KbEntry], query: &str, kind: GuidanceType, k: usize) -> Vec<String> {
    let q = hash_embed(query, 256);
    // Similarities equal to 1e-12 are ties: sums of different terms differ
    // in the last bits even when mathematically equal.
    let mut scored: Vec<(i64, &str)> = entries
        .iter()
        .filter(|e| e.guidance_type == kind)
        .map(|e| {
            let v = hash_embed(&KbEntry::embedding_text(&e.phenomenon, &e.description), 256);
            let dot: f64 = q.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
            ((dot * 1e12).round() as i64, e.entry_id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

fn kb_retrieval() -> Result<String, String> {
    let mut r = rng(5);
    let mut candidates = Vec::new();
    let mut kb = KbIndex::default();
    while kb.len() < 100 {
        let kind = if r.random_bool(0.5) { GuidanceType::Positive } else { GuidanceType::Negative };
        let c = candidate(random_phrase(&mut r, 2, 3), random_phrase(&mut r, 8, 14), kind);
        if kb.add_entry(c.clone()).is_ok() {
            candidates.push(c);
        }
    }
    let entries = kb.entries().to_vec();
    for _ in 0..50 {
        let query = random_phrase(&mut r, 3, 10);
        for k in [1, 3, 5] {
            let got = kb.retrieve(&query, "", k, k);
            let pos: Vec<String> = got.positive_hits.iter().map(|h| h.entry.entry_id.clone()).collect();
            let neg: Vec<String> = got.negative_hits.iter().map(|h| h.entry.entry_id.clone()).collect();
            // The retrieval query joins description and context with a newline.
            let q = format!("{query}\n");
            ensure(pos == oracle_top(&entries, &q, GuidanceType::Positive, k), || format!("positive top-{k} differs for {query:?}"))?;
            ensure(neg == oracle_top(&entries, &q, GuidanceType::Negative, k), || format!("negative top-{k} differs for {query:?}"))?;
        }
    }

    let first = &candidates[0];
    let echo = candidate(first.phenomenon.to_uppercase(), format!("{}.", first.description), first.guidance_type);
    ensure(matches!(kb.add_entry(echo), Err(KbError::Duplicate { similarity, .. }) if similarity >= 0.95), || {
        "near-identical entry was not rejected".into()
    })?;

    let mut shuffled = candidates.clone();
    shuffled.shuffle(&mut r);
    let mut other = KbIndex::default();
    for c in shuffled {
        other.add_entry(c).map_err(|e| e.to_string())?;
    }
    let v1 = kb.freeze().map_err(|e| e.to_string())?;
    let v2 = other.freeze().map_err(|e| e.to_string())?;
    ensure(v1 == v2, || format!("insertion order changed the version: {v1} vs {v2}"))?;

    let fresh = candidate("brand new phenomenon".into(), "a description that is long enough to be valid".into(), GuidanceType::Positive);
    ensure(matches!(kb.add_entry(fresh), Err(KbError::Frozen(_))), || "frozen index accepted an entry".into())?;
    let id = entries[0].entry_id.clone();
    ensure(matches!(kb.verify(&id), Err(KbError::Frozen(_))), || "frozen index accepted verify".into())?;
    ensure(matches!(kb.dedupe(), Err(KbError::Frozen(_))), || "frozen index accepted dedupe".into())?;
    ensure(kb.version() == v1, || "version moved after rejected mutations".into())?;
    Ok("100 entries, k in {1,3,5} vs brute-force scan; duplicate, freeze, version checks".into())
}

// 6 ------------------------------------------------------------------------

fn ledger_identities() -> Result<String, String> {
    let rows = [
        (Stage::Evidence, 16_490, 0, 932),
        (Stage::Debate, 16_990, 16_103, 1_800),
        (Stage::Compress, 18_814, 16_256, 904),
        (Stage::Arbiter, 19_579, 18_442, 1_224),
    ];
    let mut ledger = UsageLedger::default();
    for (stage, input, cached, output) in rows {
        ledger.record_usage(stage, StageUsage { calls: 1, input_tokens: input, cached_input_tokens: cached, output_tokens: output });
    }
    let t = ledger.totals();
    ensure(t.output_tokens == 4_860, || format!("output sum {}", t.output_tokens))?;
    ensure(t.cached_input_tokens == 50_801, || format!("cached sum {}", t.cached_input_tokens))?;
    ensure(t.grand_total == t.input_tokens + t.output_tokens, || "grand total identity".into())?;

    let mut totals_row = UsageLedger::default();
    totals_row.record_usage(
        Stage::Evidence,
        StageUsage { calls: 1, input_tokens: 76_533, cached_input_tokens: 50_801, output_tokens: 4_860 },
    );
    ensure(totals_row.totals().grand_total == 81_393, || format!("grand total {}", totals_row.totals().grand_total))?;

    let mut r = rng(6);
    for _ in 0..1000 {
        let mut l = UsageLedger::default();
        let mut sums = [0u64; 3];
        for _ in 0..r.random_range(0..20) {
            let stage = Stage::ALL[r.random_range(0..Stage::ALL.len())];
            let input = r.random_range(0..10_000);
            let u = StageUsage {
                calls: 1,
                input_tokens: input,
                cached_input_tokens: r.random_range(0..=input),
                output_tokens: r.random_range(0..5_000),
            };
            sums[0] += u.input_tokens;
            sums[1] += u.cached_input_tokens;
            sums[2] += u.output_tokens;
            l.record_usage(stage, u);
        }
        let t = l.totals();
        ensure([t.input_tokens, t.cached_input_tokens, t.output_tokens] == sums, || "stage sums differ from totals".into())?;
        ensure(t.grand_total == sums[0] + sums[2], || "grand total identity".into())?;
        let table = token_table(&l, 1);
        ensure(table.rows.iter().map(|row| row.output_tokens).sum::<u64>() == table.total.output_tokens, || {
            "table rows do not sum to the total row".into()
        })?;
    }
    Ok("outputs 4860, cached 50801, 76533 + 4860 = 81393; 1000 random ledgers".into())
}

// 7 ------------------------------------------------------------------------

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/golden")
}

fn golden_run(ablation: Ablation, out: &Path) -> Result<dvar_core::harness::RunSummary, String> {
    let dir = golden_dir();
    let mut config = RunConfig::load(&dir.join("scripted.toml")).map_err(|e| e.to_string())?;
    ablation.apply(&mut config);
    let provider = config.build_provider().map_err(|e| e.to_string())?;
    let kb = load_kb(&config).map_err(|e| e.to_string())?;
    let manifest = load_manifest(&dir.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(&config, provider.as_ref(), &kb, out.join("frames")).map_err(|e| e.to_string())?;
    pipeline.run_benchmark(&manifest, out, false).map_err(|e| e.to_string())
}

fn report_bytes(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut m = BTreeMap::new();
    let records = out.join("report/records");
    for e in fs::read_dir(&records).unwrap() {
        let p = e.unwrap().path();
        m.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
    }
    m.insert("summary.json".into(), fs::read(out.join("report/summary.json")).unwrap());
    m
}

fn golden_runs() -> Result<String, String> {
    let mut snapshots = Vec::new();
    for _ in 0..3 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let s = golden_run(Ablation::Full, tmp.path())?;
        ensure(s.succeeded == 6 && s.excluded == 0, || format!("{} of 6 entries succeeded", s.succeeded))?;
        snapshots.push(report_bytes(tmp.path()));
    }
    ensure(snapshots[0].len() == 7, || format!("{} report files", snapshots[0].len()))?;
    ensure(snapshots[0] == snapshots[1] && snapshots[1] == snapshots[2], || "records differ between runs".into())?;

    let record = |id: &str| -> dvar_core::harness::VerdictRecord {
        serde_json::from_slice(&snapshots[0][&format!("{id}.json")]).unwrap()
    };
    let sunset = record("real_sunset");
    ensure(
        sunset.verdict.label == Label::Real
            && sunset.debates[0].termination.as_ref().is_some_and(|t| t.loser == Agent::Gha && t.reason == LossReason::Conceded),
        || "real case is not resolved by a GHA concession".into(),
    )?;
    let grass = record("fake_grass");
    ensure(
        grass.verdict.label == Label::Fake
            && grass.debates.iter().all(|d| d.outcome == DebateOutcome::Unresolved)
            && grass.evidence.signals.iter().all(|s| s.cost_gap.is_some_and(|g| g > 0)),
        || "fake case is not decided by positive cost gaps".into(),
    )?;

    use Label::{Fake as F, Real as R};
    let pred = [F, F, F, F, R, R, R, R, R, R];
    let truth = [F, F, F, R, F, R, R, R, R, R];
    let m = compute_metrics(&pred, &truth).map_err(|e| e.to_string())?;
    let c = m.confusion;
    ensure((c.tp, c.fp, c.fn_, c.tn) == (3, 1, 1, 5), || format!("confusion {c:?}"))?;
    ensure(m.accuracy == 0.8 && m.f1 == 0.75, || format!("ACC {} F1 {}", m.accuracy, m.f1))?;
    Ok("3 byte-identical runs of 6 entries; 10-entry confusion gives ACC 0.8, F1 0.75".into())
}

// 8 ------------------------------------------------------------------------

fn ablation_reachability() -> Result<String, String> {
    for ablation in Ablation::LADDER {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let s = golden_run(ablation, tmp.path())?;
        ensure(s.succeeded == 6 && s.excluded == 0, || format!("{ablation:?}: {} excluded", s.excluded))?;
        let pan: dvar_core::harness::VerdictRecord =
            serde_json::from_slice(&fs::read(tmp.path().join("report/records/real_pan.json")).unwrap()).unwrap();
        let turns: usize = pan.debates.iter().map(|d| d.turns.len()).sum();
        let (debate, cost) = match ablation {
            Ablation::EvidenceOnly => (false, false),
            Ablation::Debate => (true, false),
            Ablation::Cost | Ablation::Full => (true, true),
        };
        ensure((turns > 0) == debate, || format!("{ablation:?}: debate toggle not reflected"))?;
        ensure(pan.compressions.is_empty() != cost, || format!("{ablation:?}: cost toggle not reflected"))?;
    }
    Ok("evidence-only, +debate, +cost, full all complete the golden corpus".into())
}

// 9 ------------------------------------------------------------------------

fn stratified_subsetting() -> Result<String, String> {
    let mut r = rng(9);
    for round in 0..200 {
        let mut manifest = Vec::new();
        let cells = r.random_range(1..8);
        for c in 0..cells {
            let label = if r.random_bool(0.5) { Label::Real } else { Label::Fake };
            let generator = (label == Label::Fake).then(|| format!("g{c}"));
            for i in 0..r.random_range(1..30) {
                manifest.push(ManifestEntry { id: format!("{round}-{c}-{i}"), source: "x".into(), label, generator: generator.clone() });
            }
        }
        manifest.shuffle(&mut r);
        let mut sizes: BTreeMap<(Option<String>, Label), usize> = BTreeMap::new();
        for e in &manifest {
            *sizes.entry((e.generator.clone(), e.label)).or_default() += 1;
        }
        let fraction: f64 = r.random_range(0.01..=1.0);
        let seed = r.random();
        let sub = stratified_subset(&manifest, fraction, seed).map_err(|e| e.to_string())?;
        for ((generator, label), n) in &sizes {
            let got = sub.iter().filter(|e| &e.generator == generator && e.label == *label).count();
            let want = ((fraction * *n as f64).round() as usize).max(1);
            ensure(got == want, || format!("cell ({generator:?}, {label}) of {n} at {fraction}: {got} vs {want}"))?;
        }
        ensure(sub == stratified_subset(&manifest, fraction, seed).map_err(|e| e.to_string())?, || "same seed, different subset".into())?;
    }
    Ok("200 random manifests; per-cell sizes and seed reproducibility".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Check, Duration); 9] = [
        ("sampling law", sampling_law, Duration::from_secs(1)),
        ("debate state machine", debate_state_machine, Duration::from_secs(5)),
        ("cost calculus", cost_calculus, Duration::from_secs(1)),
        ("reference aggregation", reference_aggregation, Duration::from_secs(5)),
        ("knowledge retrieval", kb_retrieval, Duration::from_secs(2)),
        ("ledger identities", ledger_identities, Duration::from_secs(1)),
        ("golden runs", golden_runs, Duration::from_secs(10)),
        ("ablation reachability", ablation_reachability, Duration::from_secs(30)),
        ("stratified subsetting", stratified_subsetting, Duration::from_secs(1)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= *budget {
                Ok(detail)
            } else {
                Err(format!("took {elapsed:?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS  criterion {}: {name} ({} ms) {detail}", i + 1, elapsed.as_millis()),
            Err(e) => {
                failed += 1;
                println!("FAIL  criterion {}: {name} ({} ms) {e}", i + 1, elapsed.as_millis());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

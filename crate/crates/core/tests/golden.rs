use std::fs;
use std::path::{Path, PathBuf};

use dvar_core::backend::Stage;
use dvar_core::config::RunConfig;
use dvar_core::debate::{DebateOutcome, LossReason};
use dvar_core::domain::{DecidedBy, Label};
use dvar_core::harness::{load_kb, load_manifest, Pipeline};
use dvar_core::testkit;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/golden")
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn committed_corpus_matches_regeneration() {
    let tmp = tempfile::tempdir().unwrap();
    testkit::write_golden_corpus(tmp.path()).unwrap();
    let fresh: Vec<_> = files(tmp.path()).iter().map(|p| p.strip_prefix(tmp.path()).unwrap().to_path_buf()).collect();
    let committed: Vec<_> = files(&golden_dir()).iter().map(|p| p.strip_prefix(golden_dir()).unwrap().to_path_buf()).collect();
    assert_eq!(fresh, committed);
    for rel in &fresh {
        assert_eq!(
            fs::read(tmp.path().join(rel)).unwrap(),
            fs::read(golden_dir().join(rel)).unwrap(),
            "{} differs; rerun the golden_fixtures example",
            rel.display()
        );
    }
}

fn run(out: &Path) -> dvar_core::harness::RunSummary {
    let dir = golden_dir();
    let config = RunConfig::load(&dir.join("scripted.toml")).unwrap();
    let provider = config.build_provider().unwrap();
    let kb = load_kb(&config).unwrap();
    let manifest = load_manifest(&dir.join("manifest.jsonl")).unwrap();
    let pipeline = Pipeline::new(&config, provider.as_ref(), &kb, out.join("frames")).unwrap();
    pipeline.run_benchmark(&manifest, out, true).unwrap()
}

#[test]
fn scripted_replay_reproduces_expected_outcomes() {
    let tmp = tempfile::tempdir().unwrap();
    let s = run(tmp.path());
    assert_eq!((s.entries, s.succeeded, s.excluded), (6, 6, 0));
    let m = s.metrics.unwrap();
    assert_eq!((m.confusion.tp, m.confusion.fp, m.confusion.fn_, m.confusion.tn), (3, 1, 0, 2));
    assert!((m.accuracy - 5.0 / 6.0).abs() < 1e-12);
    assert!((m.f1 - 6.0 / 7.0).abs() < 1e-12);
    assert_eq!(s.arbiter_disagreements, 1);
    assert_eq!(s.arbiter_fallbacks, 0);
    assert_eq!(s.kb_candidates, Some(1));

    let read = |id: &str| -> dvar_core::harness::VerdictRecord {
        serde_json::from_str(&fs::read_to_string(tmp.path().join(format!("report/records/{id}.json"))).unwrap()).unwrap()
    };
    let empty = read("real_empty");
    assert_eq!((empty.verdict.label, empty.verdict.confidence), (Label::Real, 0.5));
    assert_eq!(empty.verdict.decided_by, DecidedBy::ReferenceRule);
    assert_eq!(empty.usage.stage(Stage::Arbiter).calls, 0);

    let pan = read("real_pan");
    assert!(pan.arbiter_disagreement);
    assert_eq!(pan.verdict.label, Label::Fake);
    assert_eq!(pan.debates[0].termination.as_ref().unwrap().reason, LossReason::EmptyRebuttal);
    assert_eq!(pan.evidence.signals[1].cost_gap, Some(5));

    let grass = read("fake_grass");
    let gaps: Vec<_> = grass.evidence.signals.iter().map(|s| s.cost_gap).collect();
    assert_eq!(gaps, vec![Some(12), Some(9)]);
    assert!(grass.debates.iter().all(|d| d.outcome == DebateOutcome::Unresolved && d.rounds_used == 2));

    let mixed = read("fake_mixed");
    assert_eq!(mixed.verdict.label, Label::Fake);
    assert!((mixed.verdict.confidence - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn replays_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    for name in ["summary.json", "records/fake_mixed.json", "records/real_pan.json", "errors.jsonl"] {
        assert_eq!(
            fs::read(a.path().join("report").join(name)).unwrap(),
            fs::read(b.path().join("report").join(name)).unwrap(),
            "{name}"
        );
    }
}

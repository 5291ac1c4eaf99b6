//! Stage 1: frame sampling, key-frame choice, scene observation and
//! discovery of forgery traces.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Message, Session, Stage};
use crate::domain::{frame_count, validate_trace, FrameRef, SceneObservation, Trace, TraceCategory, VideoClip};
use crate::knowledge::{KbIndex, RetrievalResult};
use crate::schema::{chat_structured, extract_object, Fields, SchemaError, StructuredCall, StructuredError};
use crate::templates;

pub const DEFAULT_MAX_TRACES: usize = 8;

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("fps must be positive, got {0}")]
    NonPositiveFps(f64),
    #[error("cannot read source {path}: {message}")]
    Source { path: String, message: String },
    #[error("frame extractor failed: {0}")]
    Extractor(String),
    #[error(transparent)]
    Provider(#[from] StructuredError),
}

/// Mid-interval uniform sampling plan: `T = max(1, floor(fps * duration))`
/// timestamps at `(k + 0.5) / fps`. When the clip is shorter than one frame
/// interval the single sample sits at the clip midpoint.
pub fn sample_frames(duration_seconds: f64, fps: f64) -> Result<Vec<f64>, EvidenceError> {
    if !(duration_seconds > 0.0) || !duration_seconds.is_finite() {
        return Err(EvidenceError::NonPositiveDuration(duration_seconds));
    }
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(EvidenceError::NonPositiveFps(fps));
    }
    if fps * duration_seconds < 1.0 {
        return Ok(vec![duration_seconds / 2.0]);
    }
    let count = frame_count(duration_seconds, fps);
    Ok((0..count).map(|k| (k as f64 + 0.5) / fps).collect())
}

pub fn select_key_frame(frame_count: usize) -> usize {
    frame_count / 2
}

#[derive(Debug, Deserialize)]
struct FrameDirMeta {
    duration_seconds: f64,
    fps: f64,
}

fn is_frame_file(name: &str) -> bool {
    let Some(rest) = name.strip_prefix("frame_") else { return false };
    let Some((digits, ext)) = rest.split_once('.') else { return false };
    digits.len() == 6
        && digits.bytes().all(|b| b.is_ascii_digit())
        && matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "webp")
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, EvidenceError> {
    let source_err = |message: String| EvidenceError::Source { path: dir.display().to_string(), message };
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| source_err(e.to_string()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(is_frame_file))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(source_err("no frame_%06d.* files".into()));
    }
    Ok(frames)
}

fn build_clip(video_id: &str, duration: f64, fps: f64, files: &[PathBuf], files_fps: f64) -> Result<VideoClip, EvidenceError> {
    let plan = sample_frames(duration, fps)?;
    let frames = plan
        .iter()
        .map(|&t| {
            let idx = ((t * files_fps).floor() as usize).min(files.len() - 1);
            FrameRef { path: files[idx].display().to_string(), timestamp: t }
        })
        .collect::<Vec<_>>();
    let key_frame_index = select_key_frame(frames.len());
    let clip = VideoClip {
        video_id: video_id.to_string(),
        duration_seconds: duration,
        fps,
        frames,
        key_frame_index,
    };
    clip.validate().map_err(|e| EvidenceError::Source {
        path: video_id.to_string(),
        message: e.to_string(),
    })?;
    Ok(clip)
}

/// Builds a clip from a directory of pre-extracted `frame_%06d.*` files with
/// a `meta.json` giving `duration_seconds` and the extraction `fps`.
pub fn load_frame_dir(video_id: &str, dir: &Path, fps: f64) -> Result<VideoClip, EvidenceError> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read_to_string(&meta_path).map_err(|e| EvidenceError::Source {
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    let meta: FrameDirMeta = serde_json::from_str(&raw).map_err(|e| EvidenceError::Source {
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    let files = list_frames(dir)?;
    build_clip(video_id, meta.duration_seconds, fps, &files, meta.fps)
}

/// Runs an external frame extractor. The template is split on whitespace and
/// `{input}`, `{fps}`, `{outdir}` are substituted per argument.
pub fn extract_frames(template: &str, input: &Path, fps: f64, outdir: &Path) -> Result<Vec<PathBuf>, EvidenceError> {
    fs::create_dir_all(outdir).map_err(|e| EvidenceError::Extractor(e.to_string()))?;
    let args: Vec<String> = template
        .split_whitespace()
        .map(|a| {
            a.replace("{input}", &input.display().to_string())
                .replace("{fps}", &fps.to_string())
                .replace("{outdir}", &outdir.display().to_string())
        })
        .collect();
    let (program, rest) = args.split_first().ok_or_else(|| EvidenceError::Extractor("empty extractor command".into()))?;
    let output = Command::new(program)
        .args(rest)
        .output()
        .map_err(|e| EvidenceError::Extractor(format!("{program}: {e}")))?;
    if !output.status.success() {
        return Err(EvidenceError::Extractor(format!(
            "{program} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    list_frames(outdir)
}

/// Loads a clip from either a frame directory or a video file (through the
/// extractor, writing frames under `extract_root/<video_id>`).
pub fn load_clip(
    video_id: &str,
    source: &Path,
    fps: f64,
    extractor: Option<&str>,
    extract_root: &Path,
) -> Result<VideoClip, EvidenceError> {
    if source.is_dir() {
        return load_frame_dir(video_id, source, fps);
    }
    if !source.is_file() {
        return Err(EvidenceError::Source {
            path: source.display().to_string(),
            message: "no such file or directory".into(),
        });
    }
    let template = extractor.ok_or_else(|| {
        EvidenceError::Extractor(format!(
            "{} is a file but no extractor command is configured",
            source.display()
        ))
    })?;
    let outdir = extract_root.join(video_id);
    let files = extract_frames(template, source, fps, &outdir)?;
    let duration = files.len() as f64 / fps;
    build_clip(video_id, duration, fps, &files, fps)
}

fn clip_header(clip: &VideoClip) -> String {
    format!(
        "Video: {}\nDuration: {:.3} s; {} frames sampled uniformly at {} fps.",
        clip.video_id,
        clip.duration_seconds,
        clip.frame_count(),
        clip.fps
    )
}

fn parse_scene(raw: &str) -> Result<SceneObservation, SchemaError> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map);
    let summary = f.nonempty_string("summary");
    let environment = f.string_or_empty("environment");
    let objects = f.string_list("objects");
    let interactions = f.string_list("interactions");
    f.finish()?;
    Ok(SceneObservation { summary: summary.unwrap_or_default(), environment, objects, interactions })
}

pub fn observe_scene(session: &mut Session<'_>, clip: &VideoClip, retries: u32) -> Result<SceneObservation, EvidenceError> {
    let key = clip.key_frame();
    let messages = vec![
        Message::system(templates::SCENE.text),
        Message::user(format!(
            "{}\nKey frame: index {} at t = {:.3} s (attached).",
            clip_header(clip),
            clip.key_frame_index,
            key.timestamp
        )),
    ];
    let call = StructuredCall {
        stage: Stage::Evidence,
        label: "scene".into(),
        messages: &messages,
        temperature: 0.0,
        attachments: vec![key.clone()],
        retries,
    };
    Ok(chat_structured(session, call, parse_scene)?.value)
}

#[derive(Debug, Clone, Copy)]
pub struct TraceDiscoveryConfig {
    pub max_traces: usize,
    pub max_attachments: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub use_kb: bool,
    pub retries: u32,
}

impl Default for TraceDiscoveryConfig {
    fn default() -> Self {
        TraceDiscoveryConfig {
            max_traces: DEFAULT_MAX_TRACES,
            max_attachments: 32,
            k_pos: 3,
            k_neg: 3,
            use_kb: true,
            retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct RawTrace {
    description: String,
    category: TraceCategory,
    frame_indices: Vec<i64>,
}

fn parse_traces(raw: &str) -> Result<Vec<RawTrace>, SchemaError> {
    let map = extract_object(raw)?;
    let items = match map.get("traces") {
        Some(Value::Array(items)) => items,
        None if map.get("no_anomalies") == Some(&Value::Bool(true)) => return Ok(Vec::new()),
        Some(_) => return Err(SchemaError::one("`traces` must be an array")),
        None => return Err(SchemaError::one("missing `traces`")),
    };
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let Some(obj) = item.as_object() else {
            return Err(SchemaError::one(format!("traces[{i}] is not an object")));
        };
        let description = obj.get("description").and_then(Value::as_str).unwrap_or("").to_string();
        let category = obj
            .get("category")
            .and_then(Value::as_str)
            .map(TraceCategory::from_loose)
            .unwrap_or(TraceCategory::Other);
        let frame_indices = match obj.get("frame_indices") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(xs)) => xs.iter().map(|x| x.as_i64().unwrap_or(-1)).collect(),
            Some(_) => vec![-1],
        };
        out.push(RawTrace { description, category, frame_indices });
    }
    Ok(out)
}

/// Evenly spaced subset of at most `cap` frames, always including the first.
pub fn attachment_subset(clip: &VideoClip, cap: usize) -> Vec<(usize, FrameRef)> {
    let n = clip.frame_count();
    if cap == 0 {
        return Vec::new();
    }
    if n <= cap {
        return clip.frames.iter().cloned().enumerate().collect();
    }
    (0..cap)
        .map(|j| {
            let i = j * n / cap;
            (i, clip.frames[i].clone())
        })
        .collect()
}

/// Discovers up to `max_traces` anomalies. Invalid traces are dropped with a
/// warning; an empty list is legal.
pub fn discover_traces(
    session: &mut Session<'_>,
    clip: &VideoClip,
    scene: &SceneObservation,
    kb: &KbIndex,
    config: &TraceDiscoveryConfig,
) -> Result<(Vec<Trace>, RetrievalResult), EvidenceError> {
    let guidance = if config.use_kb {
        kb.retrieve(&scene.summary, "", config.k_pos, config.k_neg)
    } else {
        RetrievalResult::default()
    };
    let attached = attachment_subset(clip, config.max_attachments);
    let listing = attached
        .iter()
        .map(|(i, f)| format!("{i}@{:.3}s", f.timestamp))
        .collect::<Vec<_>>()
        .join(", ");
    let frame_count = clip.frame_count();
    let messages = vec![
        Message::system(templates::TRACES.render(&[
            ("max_traces", &config.max_traces.to_string()),
            ("frame_count", &frame_count.to_string()),
        ])),
        Message::user(format!(
            "{}\nScene: {}\nEnvironment: {}\nObjects: {}\nInteractions: {}\nAttached frames (index@time): {listing}\n{}",
            clip_header(clip),
            scene.summary,
            scene.environment,
            scene.objects.join("; "),
            scene.interactions.join("; "),
            guidance.render()
        )),
    ];
    let call = StructuredCall {
        stage: Stage::Evidence,
        label: "traces".into(),
        messages: &messages,
        temperature: 0.0,
        attachments: attached.into_iter().map(|(_, f)| f).collect(),
        retries: config.retries,
    };
    let raw = chat_structured(session, call, parse_traces)?.value;

    let mut traces = Vec::new();
    for (i, r) in raw.into_iter().enumerate() {
        let indices: Option<Vec<usize>> = r.frame_indices.iter().map(|&x| usize::try_from(x).ok()).collect();
        let Some(frame_indices) = indices else {
            tracing::warn!(video = %clip.video_id, position = i, "dropping trace with negative or non-integer frame index");
            continue;
        };
        let trace = Trace {
            trace_id: String::new(),
            description: r.description.trim().to_string(),
            category: r.category,
            frame_indices,
        };
        match validate_trace(&trace, frame_count) {
            Ok(()) => traces.push(trace),
            Err(e) => tracing::warn!(video = %clip.video_id, position = i, error = %e, "dropping invalid trace"),
        }
    }
    if traces.len() > config.max_traces {
        tracing::warn!(
            video = %clip.video_id,
            found = traces.len(),
            kept = config.max_traces,
            "too many traces, truncating"
        );
        traces.truncate(config.max_traces);
    }
    for (i, t) in traces.iter_mut().enumerate() {
        t.trace_id = format!("t{}", i + 1);
    }
    Ok((traces, guidance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FnProvider, RetryPolicy};

    #[test]
    fn sampling_examples() {
        let ts = sample_frames(10.0, 5.0).unwrap();
        assert_eq!(ts.len(), 50);
        assert!((ts[0] - 0.1).abs() < 1e-12);
        assert!((ts[1] - 0.3).abs() < 1e-12);
        assert!((ts[49] - 9.9).abs() < 1e-12);

        let ts = sample_frames(0.1, 5.0).unwrap();
        assert_eq!(ts.len(), 1);
        assert!(ts[0] < 0.1);

        let ts = sample_frames(4.5, 5.0).unwrap();
        assert_eq!(ts.len(), 22);
        assert!((ts[21] - 4.3).abs() < 1e-12);

        assert!(matches!(sample_frames(0.0, 5.0), Err(EvidenceError::NonPositiveDuration(_))));
        assert!(matches!(sample_frames(-1.0, 5.0), Err(EvidenceError::NonPositiveDuration(_))));
    }

    #[test]
    fn key_frame_is_middle() {
        assert_eq!(select_key_frame(50), 25);
        assert_eq!(select_key_frame(1), 0);
        assert_eq!(select_key_frame(7), 3);
    }

    #[test]
    fn frame_file_names() {
        assert!(is_frame_file("frame_000001.png"));
        assert!(is_frame_file("frame_123456.JPG"));
        assert!(!is_frame_file("frame_1.png"));
        assert!(!is_frame_file("meta.json"));
    }

    fn clip(n: usize) -> VideoClip {
        let fps = 5.0;
        let duration = n as f64 / fps;
        let frames = sample_frames(duration, fps)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, t)| FrameRef { path: format!("frame_{:06}.png", i + 1), timestamp: t })
            .collect::<Vec<_>>();
        VideoClip { video_id: "v".into(), duration_seconds: duration, fps, key_frame_index: frames.len() / 2, frames }
    }

    #[test]
    fn attachment_subset_respects_cap() {
        let c = clip(50);
        let s = attachment_subset(&c, 8);
        assert_eq!(s.len(), 8);
        assert_eq!(s[0].0, 0);
        assert!(s.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(attachment_subset(&c, 100).len(), 50);
    }

    fn scene() -> SceneObservation {
        SceneObservation {
            summary: "child standing on grass under golden sunset".into(),
            environment: "outdoor".into(),
            objects: vec![],
            interactions: vec![],
        }
    }

    fn discover(reply: &'static str) -> Vec<Trace> {
        let p = FnProvider::new("t", move |_| Ok(reply.to_string()));
        let mut s = Session::new("v", &p, RetryPolicy::default());
        discover_traces(&mut s, &clip(10), &scene(), &KbIndex::default(), &TraceDiscoveryConfig::default())
            .unwrap()
            .0
    }

    #[test]
    fn discovery_drops_invalid_and_caps() {
        let t = discover(r#"{"traces":[{"description":"grass blades unusually straight","category":"physical","frame_indices":[3,4]},{"description":"","frame_indices":[1]},{"description":"x","frame_indices":[10]},{"description":"hair drifts","category":"weird","frame_indices":[2]}]}"#);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].trace_id, "t1");
        assert_eq!(t[1].trace_id, "t2");
        assert_eq!(t[1].category, TraceCategory::Other);

        let many = Box::leak(
            format!(
                "{{\"traces\":[{}]}}",
                (0..10).map(|i| format!("{{\"description\":\"anomaly {i}\",\"frame_indices\":[{i}]}}")).collect::<Vec<_>>().join(",")
            )
            .into_boxed_str(),
        );
        let t = discover(many);
        assert_eq!(t.len(), 8);
        assert_eq!(t[7].description, "anomaly 7");
    }

    #[test]
    fn no_anomalies_sentinel() {
        assert!(discover(r#"{"traces": [], "no_anomalies": true}"#).is_empty());
        assert!(discover(r#"{"no_anomalies": true}"#).is_empty());
    }

    #[test]
    fn scene_parse_failure_after_retry() {
        let p = FnProvider::new("t", |_| Ok("I see a child.".into()));
        let mut s = Session::new("v", &p, RetryPolicy::default());
        let err = observe_scene(&mut s, &clip(10), 1).unwrap_err();
        assert!(matches!(err, EvidenceError::Provider(StructuredError::Schema { .. })));
        assert_eq!(s.ledger().stage(Stage::Evidence).calls, 2);
    }
}

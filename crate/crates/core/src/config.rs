//! Run configuration, loaded from a TOML file whose keys mirror
//! [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adjudication::LengthMode;
use crate::arbiter::ArbiterMode;
use crate::backend::{BackendError, ChatProvider, LiveConfig, LiveProvider, RetryPolicy, ScriptedProvider, API_KEY_ENV};
use crate::debate::DebateConfig;
use crate::evidence::TraceDiscoveryConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Scripted,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Scripted fixture (JSONL).
    pub fixture: Option<PathBuf>,
    pub url: Option<String>,
    pub model: Option<String>,
    /// Overridden by the `DVAR_API_KEY` environment variable.
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Scripted,
            fixture: None,
            url: None,
            model: None,
            api_key: None,
            timeout_secs: 120,
            max_retries: 2,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fps: f64,
    pub max_rounds: u32,
    pub parse_retries: u32,
    pub dead_band: u64,
    pub arbiter_mode: ArbiterMode,
    pub enable_debate: bool,
    pub enable_cost: bool,
    pub enable_kb: bool,
    pub seed: u64,
    pub parallelism: usize,
    pub max_traces: usize,
    pub max_attachments: usize,
    pub k_pos: usize,
    pub k_neg: usize,
    pub include_unverified: bool,
    pub length_mode: LengthMode,
    pub debate_temperature: f64,
    pub max_output_tokens: u32,
    pub record_wall_time: bool,
    pub kb_path: Option<PathBuf>,
    /// Frame extractor command template with `{input}`, `{fps}`, `{outdir}`.
    pub extractor: Option<String>,
    pub provider: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fps: 5.0,
            max_rounds: 2,
            parse_retries: 1,
            dead_band: 0,
            arbiter_mode: ArbiterMode::Strict,
            enable_debate: true,
            enable_cost: true,
            enable_kb: true,
            seed: 0,
            parallelism: 4,
            max_traces: 8,
            max_attachments: 32,
            k_pos: 3,
            k_neg: 3,
            include_unverified: false,
            length_mode: LengthMode::Whitespace,
            debate_temperature: 0.0,
            max_output_tokens: 2048,
            record_wall_time: true,
            kb_path: None,
            extractor: None,
            provider: ProviderConfig::default(),
        }
    }
}

/// Component ladder for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    EvidenceOnly,
    Debate,
    Cost,
    Full,
}

impl Ablation {
    pub const LADDER: [Ablation; 4] = [Ablation::EvidenceOnly, Ablation::Debate, Ablation::Cost, Ablation::Full];

    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "evidence-only" => Some(Ablation::EvidenceOnly),
            "debate" => Some(Ablation::Debate),
            "cost" => Some(Ablation::Cost),
            "full" => Some(Ablation::Full),
            _ => None,
        }
    }

    pub fn apply(self, config: &mut RunConfig) {
        let (debate, cost, kb) = match self {
            Ablation::EvidenceOnly => (false, false, false),
            Ablation::Debate => (true, false, false),
            Ablation::Cost => (true, true, false),
            Ablation::Full => (true, true, true),
        };
        config.enable_debate = debate;
        config.enable_cost = cost;
        config.enable_kb = kb;
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config: RunConfig = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.kb_path);
        fix(&mut self.provider.fixture);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.fps > 0.0) {
            return Err(ConfigError::Invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if self.max_rounds == 0 {
            return Err(ConfigError::Invalid("max_rounds must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        if !(self.debate_temperature >= 0.0) {
            return Err(ConfigError::Invalid("debate_temperature must be non-negative".into()));
        }
        if self.provider.kind == ProviderKind::Live && self.provider.url.is_none() {
            return Err(ConfigError::Invalid("live provider requires provider.url".into()));
        }
        if self.provider.kind == ProviderKind::Scripted && self.provider.fixture.is_none() {
            return Err(ConfigError::Invalid("scripted provider requires provider.fixture".into()));
        }
        Ok(())
    }

    pub fn debate(&self) -> DebateConfig {
        DebateConfig {
            max_rounds: self.max_rounds,
            parse_retries: self.parse_retries,
            temperature: self.debate_temperature,
        }
    }

    pub fn discovery(&self) -> TraceDiscoveryConfig {
        TraceDiscoveryConfig {
            max_traces: self.max_traces,
            max_attachments: self.max_attachments,
            k_pos: self.k_pos,
            k_neg: self.k_neg,
            use_kb: self.enable_kb,
            retries: self.parse_retries,
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.provider.max_retries,
            backoff: Duration::from_millis(self.provider.backoff_ms),
        }
    }

    /// Digest over the settings that can change results. Paths, secrets,
    /// parallelism and timing switches are excluded.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            for key in ["kb_path", "parallelism", "record_wall_time", "extractor"] {
                map.remove(key);
            }
            if let Some(Value::Object(p)) = map.get_mut("provider") {
                for key in ["fixture", "api_key", "timeout_secs", "backoff_ms", "max_retries"] {
                    p.remove(key);
                }
            }
        }
        let canonical = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical))[..16].to_string()
    }

    pub fn build_provider(&self) -> Result<Box<dyn ChatProvider>, BackendError> {
        match self.provider.kind {
            ProviderKind::Scripted => {
                let path = self
                    .provider
                    .fixture
                    .as_ref()
                    .ok_or_else(|| BackendError::Config("scripted provider requires provider.fixture".into()))?;
                Ok(Box::new(ScriptedProvider::from_path(path)?))
            }
            ProviderKind::Live => {
                let live = LiveConfig {
                    url: self.provider.url.clone().unwrap_or_default(),
                    model: self.provider.model.clone().unwrap_or_default(),
                    api_key: self.provider.api_key.clone(),
                    timeout_secs: self.provider.timeout_secs,
                };
                if live.api_key.is_none() && std::env::var(API_KEY_ENV).is_err() {
                    tracing::warn!("no API key configured; set {API_KEY_ENV}");
                }
                Ok(Box::new(LiveProvider::new(live)?))
            }
        }
    }
}

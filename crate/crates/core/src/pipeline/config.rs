//! Pipeline configuration: one TOML file, then environment, then dotted-path
//! overrides (`detect.nms_threshold=0.5`, `detect.detectors.0.threshold=0.3`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::crosscheck::CrosscheckConfig;
use crate::curation::CurationConfig;
use crate::datamodel::Stage;
use crate::detect::DetectConfig;
use crate::gateway::{BackendKind, BackendSpec};
use crate::recaption::{PromptTemplates, RecaptionConfig};
use crate::resample::ResampleConfig;

pub const ENV_WORKDIR: &str = "ROVI_WORKDIR";
pub const ENV_SEED: &str = "ROVI_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("override {0:?}: expected key=value")]
    OverrideSyntax(String),
    #[error("override {key:?}: {message}")]
    Override { key: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which backend serves each model-calling stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelRefs {
    pub describe: String,
    pub summarize: String,
    pub verify: String,
    /// Aesthetic scorer used for records without a precomputed score.
    pub scorer: Option<String>,
}

impl Default for ModelRefs {
    fn default() -> Self {
        ModelRefs { describe: "vlm".into(), summarize: "llm".into(), verify: "verifier".into(), scorer: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stage manifests, status sidecars and caches live here.
    pub workdir: PathBuf,
    /// Source manifest feeding the curate stage.
    pub input: PathBuf,
    pub seed: u64,
    pub workers: usize,
    /// Directory with prompt template overrides.
    pub templates_dir: Option<PathBuf>,
    pub models: ModelRefs,
    pub backends: BTreeMap<String, BackendSpec>,
    pub curation: CurationConfig,
    pub recaption: RecaptionConfig,
    pub detect: DetectConfig,
    pub resample: ResampleConfig,
    pub crosscheck: CrosscheckConfig,
    #[serde(skip)]
    pub templates: PromptTemplates,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workdir: PathBuf::from("work"),
            input: PathBuf::from("input.jsonl"),
            seed: 0,
            workers: 4,
            templates_dir: None,
            models: ModelRefs::default(),
            backends: BTreeMap::new(),
            curation: CurationConfig::default(),
            recaption: RecaptionConfig::default(),
            detect: DetectConfig::default(),
            resample: ResampleConfig::default(),
            crosscheck: CrosscheckConfig::default(),
            templates: PromptTemplates::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dot separated; numeric segments index arrays) inside `root`,
/// creating intermediate tables as needed.
pub fn set_dotted(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Override { key: path.to_string(), message };
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(err("empty path segment".into()));
    }
    let mut cur = root;
    for (k, seg) in segments.iter().enumerate() {
        let last = k + 1 == segments.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(seg.to_string(), parse_scalar(raw));
                    return Ok(());
                }
                t.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| err(format!("{seg:?} is not an array index")))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| err(format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = parse_scalar(raw);
                    return Ok(());
                }
                slot
            }
            _ => return Err(err(format!("{seg:?} is below a scalar value"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::OverrideSyntax(s.to_string()))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl PipelineConfig {
    /// File, then `ROVI_WORKDIR` / `ROVI_SEED` / backend URL variables, then
    /// `overrides`. Relative paths resolve against the file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base, overrides)
    }

    pub fn from_toml_str(text: &str, base: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut root: toml::Value = toml::from_str::<toml::Table>(text)
            .map(toml::Value::Table)
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Ok(dir) = std::env::var(ENV_WORKDIR) {
            set_dotted(&mut root, "workdir", &toml::Value::String(dir).to_string())?;
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            set_dotted(&mut root, "seed", &seed)?;
        }
        if let Some(toml::Value::Table(backends)) = root.get_mut("backends") {
            for (id, spec) in backends.iter_mut() {
                if let (Ok(url), toml::Value::Table(t)) = (std::env::var(BackendSpec::env_override_key(id)), spec) {
                    t.insert("endpoint".into(), toml::Value::String(url));
                }
            }
        }
        for (k, v) in overrides {
            set_dotted(&mut root, k, v)?;
        }
        let mut cfg: PipelineConfig =
            root.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.finish(base)?;
        Ok(cfg)
    }

    /// Resolves paths, fills backend ids, loads templates and validates.
    pub fn finish(&mut self, base: &Path) -> Result<(), ConfigError> {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.workdir);
        resolve(&mut self.input);
        if let Some(t) = self.templates_dir.as_mut() {
            resolve(t);
        }
        for (id, spec) in self.backends.iter_mut() {
            if spec.id.is_empty() {
                spec.id = id.clone();
            } else if spec.id != *id {
                return Err(ConfigError::Invalid(format!("backend key {id:?} disagrees with its id {:?}", spec.id)));
            }
        }
        self.templates = match &self.templates_dir {
            Some(dir) => PromptTemplates::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => PromptTemplates::default(),
        };
        // The top-level seed is authoritative for every random choice.
        self.resample.seed = self.seed;
        self.check()
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        if self.workers == 0 {
            return Err(invalid("workers must be >= 1".into()));
        }
        self.curation.check().map_err(invalid)?;
        self.recaption.check().map_err(|e| invalid(e.to_string()))?;
        self.detect.check().map_err(|e| invalid(e.to_string()))?;
        self.resample.check().map_err(invalid)?;
        self.crosscheck.check().map_err(invalid)?;
        self.templates.check().map_err(|e| invalid(e.to_string()))?;
        for spec in self.backends.values() {
            spec.check().map_err(invalid)?;
        }
        Ok(())
    }

    /// Backends `stage` calls, with the kind each must have.
    pub fn backends_for(&self, stage: Stage) -> Vec<(String, BackendKind)> {
        match stage {
            Stage::Curate => self.models.scorer.iter().map(|s| (s.clone(), BackendKind::Scorer)).collect(),
            Stage::Describe => vec![(self.models.describe.clone(), BackendKind::Chat)],
            Stage::Summarize => vec![(self.models.summarize.clone(), BackendKind::Chat)],
            Stage::Detect => {
                self.detect.detectors.iter().map(|d| (d.backend_id().to_string(), BackendKind::Detector)).collect()
            }
            Stage::Crosscheck => vec![(self.models.verify.clone(), BackendKind::Chat)],
            Stage::Resample | Stage::Finalize => Vec::new(),
        }
    }

    /// Every backend referenced by the stages in `stages` exists with the
    /// right kind.
    pub fn check_backends(&self, stages: &[Stage]) -> Result<(), ConfigError> {
        for &stage in stages {
            for (id, kind) in self.backends_for(stage) {
                let spec = self.backends.get(&id).ok_or_else(|| {
                    ConfigError::Invalid(format!("stage {stage} needs backend {id:?}, which is not configured"))
                })?;
                if spec.kind != kind {
                    return Err(ConfigError::Invalid(format!(
                        "stage {stage} needs backend {id:?} to be of kind {kind:?}, found {:?}",
                        spec.kind
                    )));
                }
            }
        }
        Ok(())
    }

    fn model_name(&self, id: &str) -> String {
        self.backends.get(id).map(|b| b.model_name.clone()).unwrap_or_default()
    }

    /// Configuration subtree whose digest keys a stage's resumable work.
    /// Endpoints, timeouts and worker counts are excluded: they change where
    /// and how fast results come, not what they are.
    pub fn stage_config(&self, stage: Stage) -> Value {
        let t = &self.templates;
        match stage {
            Stage::Curate => json!({
                "curation": self.curation,
                "scorer": self.models.scorer.as_ref().map(|s| self.model_name(s)),
            }),
            Stage::Describe => json!({
                "template": t.describe,
                "max_description_tokens": self.recaption.max_description_tokens,
                "negative_patterns": self.recaption.negative_patterns,
                "model": self.model_name(&self.models.describe),
            }),
            Stage::Summarize => json!({
                "templates": [t.summarize_pass1, t.summarize_pass2],
                "recaption": self.recaption,
                "model": self.model_name(&self.models.summarize),
            }),
            Stage::Detect => json!({
                "detect": self.detect,
                "models": self.detect.detectors.iter().map(|d| self.model_name(d.backend_id())).collect::<Vec<_>>(),
            }),
            Stage::Resample => json!({ "resample": self.resample }),
            Stage::Crosscheck => json!({
                "template": t.verify,
                "crosscheck": self.crosscheck,
                "model": self.model_name(&self.models.verify),
            }),
            Stage::Finalize => json!({ "emit": "verified" }),
        }
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.workdir.join(format!("{stage}.jsonl"))
    }

    pub fn sidecar_path(&self, stage: Stage) -> PathBuf {
        self.workdir.join(format!("{stage}.status.jsonl"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.workdir.join("cache")
    }

    /// Backend specs with ids filled, ready for the gateway.
    pub fn backend_specs(&self) -> Vec<BackendSpec> {
        self.backends.values().cloned().collect()
    }
}

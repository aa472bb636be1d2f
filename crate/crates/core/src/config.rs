//! Pipeline configuration: one TOML file holding providers, parameters,
//! thresholds, paths, seed and concurrency.
//!
//! Validation collects every violation with its field path instead of
//! stopping at the first. Relative paths resolve against the directory of
//! the config file; the serialized snapshot keeps them as written.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatBackend, ChatProviderConfig};
use crate::debias::DEFAULT_SCREEN_THRESHOLD;
use crate::embedding::{EmbeddingBackend, EmbeddingProviderConfig};
use crate::error::{PipelineError, Violation};
use crate::fill::DEFAULT_THETA;
use crate::similarity::{Bm25Params, SimilarityWeights};

pub const CONFIG_SCHEMA: &str = "upcs-config/1";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub work_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_prompts: Option<PathBuf>,
    /// Bias lexicon JSONL; the bundled lexicon when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Distribution spec JSON; the bundled D_unbias when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transcripts: Option<PathBuf>,
    /// Directory of `*.v1.txt` prompt templates; bundled when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerBackend {
    #[default]
    Lexicon,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerConfig {
    pub backend: ScorerBackend,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            backend: ScorerBackend::Lexicon,
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorBackend {
    #[default]
    ScoreDifference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparatorConfig {
    pub backend: ComparatorBackend,
    /// Minimum score gap for the score-difference comparator to pick a side.
    pub margin: f64,
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        let chat = ChatProviderConfig::default();
        ComparatorConfig {
            backend: ComparatorBackend::ScoreDifference,
            margin: 0.0,
            endpoint: chat.endpoint,
            model: chat.model,
            temperature: chat.temperature,
            max_retries: chat.max_retries,
            timeout_secs: chat.timeout_secs,
        }
    }
}

impl ComparatorConfig {
    pub fn chat(&self) -> ChatProviderConfig {
        ChatProviderConfig {
            backend: ChatBackend::Remote,
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            temperature: self.temperature,
            max_retries: self.max_retries,
            timeout_secs: self.timeout_secs,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Lexicon screen flags when normalized BM25 is strictly above this.
    pub screen: f64,
    /// Fill gate passes when normalized BM25 is at least this.
    pub fill_theta: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            screen: DEFAULT_SCREEN_THRESHOLD,
            fill_theta: DEFAULT_THETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub schema: String,
    pub seed: u64,
    pub concurrency: usize,
    pub paths: PathsConfig,
    pub generator: ChatProviderConfig,
    pub reviewer: ChatProviderConfig,
    pub embedder: EmbeddingProviderConfig,
    pub scorer: ScorerConfig,
    pub comparator: ComparatorConfig,
    pub similarity: SimilarityWeights,
    pub bm25: Bm25Params,
    pub thresholds: Thresholds,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema: CONFIG_SCHEMA.to_string(),
            seed: 0,
            concurrency: 4,
            paths: PathsConfig::default(),
            generator: ChatProviderConfig::default(),
            reviewer: ChatProviderConfig::default(),
            embedder: EmbeddingProviderConfig::default(),
            scorer: ScorerConfig::default(),
            comparator: ComparatorConfig::default(),
            similarity: SimilarityWeights::default(),
            bm25: Bm25Params::default(),
            thresholds: Thresholds::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

/// Backend family selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendChoice {
    Mock,
    Remote,
}

impl PipelineConfig {
    /// Resolves a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(self.paths.work_dir.as_deref().unwrap_or(Path::new("work")))
    }

    /// Switches every provider to its offline or remote backend.
    pub fn set_backend(&mut self, choice: BackendChoice) {
        let (chat, embed, scorer, comparator) = match choice {
            BackendChoice::Mock => (
                ChatBackend::Mock,
                EmbeddingBackend::Hash,
                ScorerBackend::Lexicon,
                ComparatorBackend::ScoreDifference,
            ),
            BackendChoice::Remote => (
                ChatBackend::Remote,
                EmbeddingBackend::Remote,
                ScorerBackend::Remote,
                ComparatorBackend::Remote,
            ),
        };
        self.generator.backend = chat;
        self.reviewer.backend = chat;
        self.embedder.backend = embed;
        self.scorer.backend = scorer;
        self.comparator.backend = comparator;
    }

    /// Checks every invariant and returns all violations found.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(Violation {
                field: field.to_string(),
                message,
            })
        };
        if self.schema != CONFIG_SCHEMA {
            push(
                "schema",
                format!("expected {CONFIG_SCHEMA:?}, got {:?}", self.schema),
            );
        }
        if self.concurrency == 0 {
            push("concurrency", "must be >= 1".into());
        }
        if let Err(e) = self.similarity.validate() {
            push("similarity", e);
        }
        if let Err(e) = self.bm25.validate() {
            push("bm25", e);
        }
        for (field, v) in [
            ("thresholds.screen", self.thresholds.screen),
            ("thresholds.fill_theta", self.thresholds.fill_theta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                push(field, format!("must be in [0,1], got {v}"));
            }
        }

        match &self.paths.work_dir {
            None => push("paths.work_dir", "required".into()),
            Some(p) if p.as_os_str().is_empty() => {
                push("paths.work_dir", "must not be empty".into())
            }
            Some(_) => {}
        }
        match &self.paths.seed_prompts {
            None => push("paths.seed_prompts", "required".into()),
            Some(p) => {
                if !self.resolve(p).is_file() {
                    push(
                        "paths.seed_prompts",
                        format!("no such file: {}", self.resolve(p).display()),
                    );
                }
            }
        }
        for (field, p, dir) in [
            ("paths.lexicon", &self.paths.lexicon, false),
            ("paths.distribution", &self.paths.distribution, false),
            ("paths.transcripts", &self.paths.transcripts, false),
            ("paths.prompts_dir", &self.paths.prompts_dir, true),
        ] {
            if let Some(p) = p {
                let r = self.resolve(p);
                let ok = if dir { r.is_dir() } else { r.is_file() };
                if !ok {
                    push(
                        field,
                        format!(
                            "no such {}: {}",
                            if dir { "directory" } else { "file" },
                            r.display()
                        ),
                    );
                }
            }
        }

        for (section, chat) in [("generator", &self.generator), ("reviewer", &self.reviewer)] {
            check_chat(section, chat, &mut push);
        }
        if self.comparator.backend == ComparatorBackend::Remote {
            check_chat("comparator", &self.comparator.chat(), &mut push);
        }
        if !(self.comparator.margin >= 0.0 && self.comparator.margin <= 1.0) {
            push(
                "comparator.margin",
                format!("must be in [0,1], got {}", self.comparator.margin),
            );
        }
        if self.embedder.dimension < 2 {
            push(
                "embedder.dimension",
                format!("must be >= 2, got {}", self.embedder.dimension),
            );
        }
        if self.embedder.max_in_flight == 0 {
            push("embedder.max_in_flight", "must be >= 1".into());
        }
        if self.embedder.backend == EmbeddingBackend::Remote {
            remote_fields(
                "embedder",
                &self.embedder.endpoint,
                &self.embedder.model,
                &mut push,
            );
        }
        if self.scorer.backend == ScorerBackend::Remote {
            remote_fields(
                "scorer",
                &self.scorer.endpoint,
                &self.scorer.model,
                &mut push,
            );
        }
        out
    }

    /// TOML rendering of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn check_chat(section: &str, chat: &ChatProviderConfig, push: &mut impl FnMut(&str, String)) {
    if !(chat.temperature >= 0.0 && chat.temperature <= 2.0) {
        push(
            &format!("{section}.temperature"),
            format!("must be in [0,2], got {}", chat.temperature),
        );
    }
    if chat.backend == ChatBackend::Remote {
        remote_fields(section, &chat.endpoint, &chat.model, push);
    }
}

fn remote_fields(section: &str, endpoint: &str, model: &str, push: &mut impl FnMut(&str, String)) {
    if endpoint.is_empty() {
        push(
            &format!("{section}.endpoint"),
            "required for the remote backend".into(),
        );
    }
    if model.is_empty() {
        push(
            &format!("{section}.model"),
            "required for the remote backend".into(),
        );
    }
}

const SECTIONS: &[&str] = &[
    "schema",
    "seed",
    "concurrency",
    "paths",
    "generator",
    "reviewer",
    "embedder",
    "scorer",
    "comparator",
    "similarity",
    "bm25",
    "thresholds",
];

fn section<T: DeserializeOwned + Default>(
    table: &toml::Table,
    key: &str,
    violations: &mut Vec<Violation>,
) -> T {
    match table.get(key) {
        None => T::default(),
        Some(v) => v.clone().try_into().unwrap_or_else(|e: toml::de::Error| {
            violations.push(Violation {
                field: key.to_string(),
                message: e.message().to_string(),
            });
            T::default()
        }),
    }
}

/// Parses TOML text into a config with defaults injected. Violations
/// include parse problems and every invariant failure. `base_dir` anchors
/// relative paths.
pub fn parse_config(text: &str, base_dir: &Path) -> (PipelineConfig, Vec<Violation>) {
    let mut violations = Vec::new();
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            violations.push(Violation {
                field: "<file>".into(),
                message: e.message().to_string(),
            });
            toml::Table::new()
        }
    };
    for key in table.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            violations.push(Violation {
                field: key.clone(),
                message: "unknown field".into(),
            });
        }
    }
    let defaults = PipelineConfig::default();
    let schema = match table.get("schema") {
        None => defaults.schema.clone(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => {
            violations.push(Violation {
                field: "schema".into(),
                message: "must be a string".into(),
            });
            defaults.schema.clone()
        }
    };
    let mut int_field = |key: &str, default: u64| -> u64 {
        match table.get(key) {
            None => default,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                violations.push(Violation {
                    field: key.to_string(),
                    message: "must be a non-negative integer".into(),
                });
                default
            }
        }
    };
    let seed = int_field("seed", defaults.seed);
    let concurrency = int_field("concurrency", defaults.concurrency as u64) as usize;
    let config = PipelineConfig {
        schema,
        seed,
        concurrency,
        paths: section(&table, "paths", &mut violations),
        generator: section(&table, "generator", &mut violations),
        reviewer: section(&table, "reviewer", &mut violations),
        embedder: section(&table, "embedder", &mut violations),
        scorer: section(&table, "scorer", &mut violations),
        comparator: section(&table, "comparator", &mut violations),
        similarity: section(&table, "similarity", &mut violations),
        bm25: section(&table, "bm25", &mut violations),
        thresholds: section(&table, "thresholds", &mut violations),
        base_dir: base_dir.to_path_buf(),
    };
    violations.extend(config.violations());
    (config, violations)
}

/// Reads and checks a config file, returning the effective config together
/// with all violations.
pub fn check_config(path: &Path) -> Result<(PipelineConfig, Vec<Violation>), PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::io(format!("reading config {}", path.display()), e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(parse_config(&text, &base))
}

pub fn validate_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let (config, violations) = check_config(path)?;
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(PipelineError::Config(violations))
    }
}

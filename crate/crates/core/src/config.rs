//! Run configuration: a TOML file with sections, overridden key by key from
//! the command line, validated as a whole before any work starts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::AnnotateConfig;
use crate::corpus::{SyntheticSpec, SyntheticTopic};
use crate::reweight::ReweighterConfig;
use crate::seed::sub_seed;
use crate::trainer::{Strategy, TrainConfig};

/// File name of the resolved config written into every output directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const LABELER_URL_ENV: &str = "TOREMI_LABELER_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub total_steps: u64,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub sequence_length: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            strategy: t.strategy,
            sequence_length: t.sequence_length,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSettings {
    pub samples_per_topic: usize,
    pub sequence_length: usize,
    pub word_length: usize,
    pub topics: Vec<SyntheticTopic>,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            samples_per_topic: s.samples_per_topic,
            sequence_length: s.sequence_length,
            word_length: s.word_length,
            topics: s.topics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerSettings {
    /// Completion endpoint; `TOREMI_LABELER_URL` is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generate_template: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_template: Option<PathBuf>,
    /// Rules for the offline mock labeler.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_rules: Option<PathBuf>,
}

impl Default for LabelerSettings {
    fn default() -> Self {
        Self {
            url: None,
            timeout_secs: 30,
            attempts: 3,
            taxonomy: None,
            generate_template: None,
            select_template: None,
            mock_rules: None,
        }
    }
}

impl LabelerSettings {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// Configured URL, else the environment variable.
    pub fn resolved_url(&self) -> Option<String> {
        self.url
            .clone()
            .or_else(|| std::env::var(LABELER_URL_ENV).ok().filter(|u| !u.trim().is_empty()))
    }
}

/// Every setting of a run. Component seeds are derived from the single
/// top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Share of each topic held out for evaluation.
    pub heldout_fraction: f64,
    pub reweighter: ReweighterConfig,
    pub train: TrainSettings,
    pub synthetic: SyntheticSettings,
    pub annotate: AnnotateConfig,
    pub labeler: LabelerSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            heldout_fraction: 0.1,
            reweighter: ReweighterConfig::default(),
            train: TrainSettings::default(),
            synthetic: SyntheticSettings::default(),
            annotate: AnnotateConfig::default(),
            labeler: LabelerSettings::default(),
        }
    }
}

/// A `section.key = value` assignment from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }

    /// Parses `key=value`. The value is read as a TOML literal when possible
    /// and as a bare string otherwise.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(text.to_owned()))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError::Override(text.to_owned()));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
        Ok(Self::new(key, value))
    }
}

fn apply_override(table: &mut toml::Table, ov: &Override) -> Result<(), ConfigError> {
    let mut parts: Vec<&str> = ov.key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{}: {part} is not a section", ov.key)))?;
    }
    node.insert(last.to_owned(), ov.value.clone());
    Ok(())
}

impl RunConfig {
    /// Builds the config from defaults, then `file`, then `overrides` in
    /// order, and validates the result.
    pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<Self, ConfigError> {
        let (mut table, origin) = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let table = toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Parse {
                    origin: path.display().to_string(),
                    message: e.to_string(),
                })?;
                (table, path.display().to_string())
            }
            None => (toml::Table::new(), "defaults".to_owned()),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: if overrides.is_empty() {
                    origin
                } else {
                    format!("{origin} with command-line overrides")
                },
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "heldout_fraction must lie in (0, 1), got {}",
                self.heldout_fraction
            )));
        }
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.synthetic_spec().validate().map_err(|e| invalid(&e))?;
        self.annotate.validate().map_err(|e| invalid(&e))?;
        if self.labeler.attempts == 0 || self.labeler.timeout_secs == 0 {
            return Err(ConfigError::Invalid(
                "labeler attempts and timeout_secs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn component_seed(&self, component: &str) -> u64 {
        sub_seed(self.seed, component)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.train.total_steps,
            batch_size: self.train.batch_size,
            seed: self.component_seed("train"),
            strategy: self.train.strategy,
            sequence_length: self.train.sequence_length,
            learning_rate: self.train.learning_rate,
            reweighter: self.reweighter.clone(),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            topics: self.synthetic.topics.clone(),
            samples_per_topic: self.synthetic.samples_per_topic,
            sequence_length: self.synthetic.sequence_length,
            word_length: self.synthetic.word_length,
            seed: self.component_seed("synthetic"),
        }
    }

    pub fn annotate_config(&self) -> AnnotateConfig {
        AnnotateConfig {
            seed: self.component_seed("annotate"),
            ..self.annotate.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Writes the resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

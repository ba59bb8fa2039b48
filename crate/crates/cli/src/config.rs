//! Layered run configuration: built-in defaults, then an optional JSON
//! config file, then command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use seqforge::data::DEFAULT_FEATURE_SEPARATOR;
use seqforge::decoder::DecodeOptions;
use seqforge::model::ModelConfig;
use seqforge::trainer::TrainConfig;

/// A configuration problem, always tied to the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.reason)
    }
}

impl std::error::Error for ConfigError {}

/// Preprocessing limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub words_min_frequency: usize,
    pub src_seq_length: usize,
    pub tgt_seq_length: usize,
    pub feature_separator: char,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            src_vocab_size: 50_000,
            tgt_vocab_size: 50_000,
            words_min_frequency: 1,
            src_seq_length: 50,
            tgt_seq_length: 50,
            feature_separator: DEFAULT_FEATURE_SEPARATOR,
        }
    }
}

impl DataConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
        ] {
            if v < 5 {
                return Err(ConfigError::new(key, "must be >= 5 (4 specials plus one word)"));
            }
        }
        for (key, v) in [
            ("words_min_frequency", self.words_min_frequency),
            ("src_seq_length", self.src_seq_length),
            ("tgt_seq_length", self.tgt_seq_length),
        ] {
            if v == 0 {
                return Err(ConfigError::new(key, "must be >= 1"));
            }
        }
        if self.feature_separator.is_whitespace() {
            return Err(ConfigError::new("feature_separator", "must not be whitespace"));
        }
        Ok(())
    }
}

/// Every tunable section, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub data: DataConfig,
}

pub const SECTIONS: [&str; 4] = ["model", "train", "decode", "data"];

/// One flag override: section, key and value.
pub type Override = (&'static str, &'static str, Value);

fn defaults() -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("model".into(), serde_json::to_value(ModelConfig::default()).unwrap());
    m.insert("train".into(), serde_json::to_value(TrainConfig::default()).unwrap());
    m.insert("decode".into(), serde_json::to_value(DecodeOptions::default()).unwrap());
    m.insert("data".into(), serde_json::to_value(DataConfig::default()).unwrap());
    m
}

fn overlay(base: &mut Map<String, Value>, file: &Value) -> Result<(), ConfigError> {
    let top = file
        .as_object()
        .ok_or_else(|| ConfigError::new("config", "top level must be an object"))?;
    for (section, body) in top {
        let target = base
            .get_mut(section)
            .and_then(Value::as_object_mut)
            .ok_or_else(|| ConfigError::new(section.clone(), format!("unknown section (expected one of {SECTIONS:?})")))?;
        let body = body
            .as_object()
            .ok_or_else(|| ConfigError::new(section.clone(), "section must be an object"))?;
        for (key, v) in body {
            if !target.contains_key(key) {
                return Err(ConfigError::new(format!("{section}.{key}"), "unknown key"));
            }
            target.insert(key.clone(), v.clone());
        }
    }
    Ok(())
}

fn section<T: serde::de::DeserializeOwned>(m: &Map<String, Value>, name: &str) -> Result<T, ConfigError> {
    serde_json::from_value(m[name].clone()).map_err(|e| {
        // serde reports "invalid type: ... " without the field; find it.
        let key = m[name]
            .as_object()
            .and_then(|o| o.keys().find(|k| e.to_string().contains(k.as_str())).cloned())
            .unwrap_or_else(|| name.to_string());
        ConfigError::new(key, e.to_string())
    })
}

/// Resolves defaults < config file < flags and validates every range.
pub fn resolve(config_file: Option<&Path>, flags: &[Override]) -> Result<RunConfig, ConfigError> {
    let mut merged = defaults();
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        overlay(&mut merged, &file)?;
    }
    for (sec, key, v) in flags {
        merged[*sec]
            .as_object_mut()
            .expect("sections are objects")
            .insert((*key).to_string(), v.clone());
    }
    let mut cfg = RunConfig {
        model: section(&merged, "model")?,
        train: section(&merged, "train")?,
        decode: section(&merged, "decode")?,
        data: section(&merged, "data")?,
    };
    // The trainer owns dropout; the model copy mirrors it.
    cfg.model.dropout = cfg.train.dropout;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    // Vocabulary and feature sizes come from the data; check the rest with
    // placeholders.
    let mut model = cfg.model.clone();
    model.src_vocab_size = model.src_vocab_size.max(4);
    model.tgt_vocab_size = model.tgt_vocab_size.max(4);
    model.num_features = 0;
    model.feat_vocab_sizes.clear();
    model.validate().map_err(|e| match e {
        seqforge::model::ModelError::InvalidConfig { key, reason } => ConfigError::new(key, reason),
        other => ConfigError::new("model", other.to_string()),
    })?;
    if cfg.model.feat_vec_size == 0 {
        return Err(ConfigError::new("feat_vec_size", "must be >= 1"));
    }
    cfg.train.validate().map_err(|e| match e {
        seqforge::trainer::TrainError::InvalidConfig { key, reason } => ConfigError::new(key, reason),
        other => ConfigError::new("train", other.to_string()),
    })?;
    let d = &cfg.decode;
    if d.beam_size == 0 {
        return Err(ConfigError::new("beam_size", "must be >= 1"));
    }
    if d.n_best == 0 || d.n_best > d.beam_size {
        return Err(ConfigError::new("n_best", "must be in 1..=beam_size"));
    }
    if d.max_len == 0 {
        return Err(ConfigError::new("max_len", "must be >= 1"));
    }
    if !(d.length_alpha >= 0.0) {
        return Err(ConfigError::new("length_alpha", "must be >= 0"));
    }
    cfg.data.validate()
}

/// Fails with the flag name when an input path is missing.
pub fn existing(key: &str, path: &Path) -> Result<PathBuf, ConfigError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(ConfigError::new(key, format!("{} does not exist", path.display())))
    }
}

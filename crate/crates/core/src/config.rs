//! Run configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusConfig, WindowConfig};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::masking::{check_mix, MaskConfig};
use crate::model::ModelConfig;
use crate::synth::WorldSpec;
use crate::train::{LoraSection, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Interaction log read by `ingest`.
    pub interactions: Option<PathBuf>,
    /// Optional template file (JSON lines of `{id, family, text, held_out}`).
    pub templates: Option<PathBuf>,
    /// Every artifact is written under this directory.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            interactions: None,
            templates: None,
            work_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub sample: WindowConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub lora: LoraSection,
    pub eval: EvalConfig,
    pub world: WorldSpec,
    pub paths: Paths,
}

fn window_validate(w: &WindowConfig) -> Result<()> {
    check_mix(&w.window_mix, "sample.window_mix")?;
    if !(w.short_horizon_days > 0.0 && w.short_horizon_days < w.medium_horizon_days) {
        return Err(Error::Config(
            "sample horizons must satisfy 0 < short_horizon_days < medium_horizon_days".into(),
        ));
    }
    if w.max_history_items < 2 {
        return Err(Error::Config("sample.max_history_items must be at least 2".into()));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = RunConfig::deserialize(table)
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| Error::File {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Checks every section. `model.vocab_size = 0` is allowed here because it
    /// is filled from the vocabulary at pretraining time.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = 1;
        }
        model.validate()?;
        self.mask.validate()?;
        window_validate(&self.sample)?;
        if self.corpus.examples_per_user == 0 || self.corpus.families.is_empty() {
            return Err(Error::Config("corpus needs examples_per_user >= 1 and at least one family".into()));
        }
        self.train.validate()?;
        if self.train.max_len > self.model.max_len {
            return Err(Error::Config(format!(
                "train.max_len ({}) exceeds model.max_len ({})",
                self.train.max_len, self.model.max_len
            )));
        }
        self.lora.validate()?;
        if !self.lora.enabled && self.train.mode == crate::train::TrainMode::LoraOnly {
            return Err(Error::Config("train.mode = \"lora_only\" requires lora.enabled".into()));
        }
        self.eval.validate()?;
        self.world.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    pub fn work_path(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(name)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `a.b.c=value`, where `value` is parsed as a TOML value and falls back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

//! Run configuration: one JSON document with a section per component.
//! Every field has a default and unknown keys are rejected, so `{}` is a
//! complete config and a typo fails loudly with its dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::regions::RegionGenConfig;
use crate::sampling::SamplingConfig;
use crate::synth::probes::EvalConfig;
use crate::synth::DataConfig;
use crate::train::{StepConfig, TrainConfig};

pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub sampling: SamplingConfig,
    pub regions: RegionGenConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn step(&self) -> StepConfig {
        StepConfig {
            train: self.train.clone(),
            sampling: self.sampling.clone(),
            regions: self.regions.clone(),
            loss: self.loss.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.step().validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        let need = self.sampling.span();
        if self.data.world.frames < need {
            return Err(Error::Config(format!(
                "data.world.frames {} is shorter than a clip ({} frames at stride {})",
                self.data.world.frames, self.sampling.clip_len, self.sampling.frame_stride
            )));
        }
        Ok(())
    }

    /// Defaults, then the JSON document, then `key=value` overrides.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::Config("top level must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_str(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        Self::from_value(doc, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_str(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Writes the fully resolved config as `dir/config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `a.b.c=value`; the value is parsed as JSON and taken as a plain string
/// when that fails, so `regions.method=fh` needs no quoting.
fn apply_override(doc: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {item:?} has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{}: not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}

//! Run configuration: defaults, then a JSON file, then `key.path=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{io_err, Error, Result};
use crate::geometry::KernelPolicy;
use crate::metrics::DEFAULT_N_VALUES;
use crate::model::ModelSpec;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub resize_to: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    pub n_values: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { resize_to: 128, q: 5, n_values: DEFAULT_N_VALUES.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub kernel: KernelPolicy,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Recursively overlays `patch` onto `base`. Keys missing from `base` are errors.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| config_err(format!("unknown key {sub:?}")))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Parses `a.b.c=value`. The value is read as JSON, falling back to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| config_err(format!("override {s:?} is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(config_err(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

impl RunConfig {
    /// Resolves the three layers. Unknown keys in any layer are rejected.
    pub fn resolve(file_json: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default()).map_err(|e| config_err(e.to_string()))?;
        if let Some(text) = file_json {
            let patch: Value = serde_json::from_str(text).map_err(|e| config_err(format!("config file: {e}")))?;
            merge(&mut tree, patch, "")?;
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            let mut patch = value;
            for seg in path.iter().rev() {
                patch = Value::Object([(seg.clone(), patch)].into_iter().collect());
            }
            merge(&mut tree, patch, "")?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(io_err(p))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.kernel.validate()?;
        if self.data.q == 0 {
            return Err(config_err("data.Q must be at least 1"));
        }
        if self.data.n_values.is_empty() {
            return Err(config_err("data.n_values must not be empty"));
        }
        Ok(())
    }
}

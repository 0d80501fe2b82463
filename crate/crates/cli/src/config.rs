//! Run configuration: one file with a section per pipeline stage. Missing
//! fields keep their defaults; unknown fields are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use conrft_core::encoder::PretrainConfig;
use conrft_core::intervention::ScriptedIntervenerConfig;
use conrft_core::recipe;
use conrft_core::reward::ClassifierConfig;
use conrft_core::types::TrainConfig;

/// Raised for anything wrong with the configuration; exits with code 3.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Expert play the encoder is pretrained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainData {
    pub episodes_per_env: usize,
    pub noise: f64,
    pub seed: u64,
    /// Expert actions per regression label.
    pub chunk: usize,
}

/// Expert episodes the classifier examples are cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleData {
    pub episodes: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_data: PretrainData,
    pub classifier: ClassifierConfig,
    pub examples: ExampleData,
    pub intervener: ScriptedIntervenerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: recipe::desk_config(0),
            pretrain: PretrainConfig {
                epochs: recipe::PRETRAIN_EPOCHS,
                ..PretrainConfig::default()
            },
            pretrain_data: PretrainData {
                episodes_per_env: recipe::PRETRAIN_EPISODES,
                noise: recipe::PRETRAIN_NOISE,
                seed: recipe::PRETRAIN_SEED,
                chunk: recipe::ACTION_CHUNK,
            },
            classifier: ClassifierConfig::default(),
            examples: ExampleData {
                episodes: recipe::EXAMPLE_EPISODES,
                noise: recipe::EXAMPLE_NOISE,
                seed: recipe::EXAMPLE_SEED,
            },
            intervener: ScriptedIntervenerConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, read as TOML when it ends in `.toml`
    /// and as JSON otherwise.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            let over: Value = if path.extension().is_some_and(|e| e == "toml") {
                let t: toml::Value = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                serde_json::to_value(t).map_err(|e| ConfigError(e.to_string()))?
            } else {
                serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
            };
            if !over.is_object() {
                return Err(ConfigError(format!("{} must hold a table of sections", path.display())));
            }
            merge(&mut value, over);
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: conrft_core::Error| ConfigError(e.to_string());
        self.train.validate().map_err(core)?;
        self.intervener.validate().map_err(core)?;
        if self.pretrain_data.chunk == 0 || self.pretrain_data.episodes_per_env == 0 {
            return Err(ConfigError("pretrain_data needs positive episodes_per_env and chunk".into()));
        }
        if self.examples.episodes == 0 {
            return Err(ConfigError("examples.episodes must be positive".into()));
        }
        if !(self.classifier.holdout >= 0.0 && self.classifier.holdout < 1.0) {
            return Err(ConfigError("classifier.holdout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

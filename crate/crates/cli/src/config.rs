//! Pipeline configuration: one YAML document, every key optional, unknown
//! keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use travkit_core::footprint::FootprintParams;
use travkit_core::fusion::FusionParams;
use travkit_core::label::LabelParams;
use travkit_core::prior::PriorParams;
use travkit_core::prompt::PromptParams;
use travkit_core::synth::SceneSpec;
use travkit_net::model::NetConfig;
use travkit_net::train::TrainConfig;

pub const CONFIG_FILE: &str = "config.yaml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub footprint: FootprintParams,
    pub prior: PriorParams,
    pub prompt: PromptParams,
    pub fusion: FusionParams,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub synth: SceneSpec,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

impl PipelineConfig {
    pub fn from_yaml(text: &str) -> Result<Self, ConfigError> {
        // an empty document means all defaults
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let read = |msg: String| ConfigError::Read { path: path.display().to_string(), msg };
        let text = std::fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        Self::from_yaml(&text).map_err(|e| read(e.to_string()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// The full document with every default written out.
    pub fn materialize(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Writes the materialized config into `dir`.
    pub fn echo_into(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), self.materialize())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |ns: &str, e: String| ConfigError::Invalid(format!("{ns}: {e}"));
        self.footprint.robot.validate().map_err(|e| bad("footprint.robot", e.to_string()))?;
        self.prior.thresholds().validate().map_err(|e| bad("prior", e.to_string()))?;
        self.net.validate().map_err(|e| bad("net", e))?;
        self.train.validate().map_err(|e| bad("train", e))?;
        self.synth.validate().map_err(|e| bad("synth", e.to_string()))?;
        Ok(())
    }

    pub fn label_params(&self) -> LabelParams {
        LabelParams {
            footprint: self.footprint.clone(),
            prior: self.prior.clone(),
            prompt: self.prompt.clone(),
            fusion: self.fusion.clone(),
            ablation: self.train.ablation.labeling(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

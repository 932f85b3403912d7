//! Run configuration file: keypoint schema, network and training settings.

use std::path::Path;

use aggpose_core::{ModelConfig, TrainConfig};
use aggpose_data::KeypointSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// The network, either a named preset or a full description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset { preset: String },
    Explicit(ModelConfig),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset {
            preset: "aggpose-t".into(),
        }
    }
}

/// Contents of a TOML run file.
///
/// ```toml
/// schema = "infant"          # "coco", "infant" or a path to a schema JSON
/// [model]
/// preset = "aggpose-t"       # or the full set of network fields
/// [train]
/// total_steps = 2000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: "infant".into(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn resolve_schema(&self) -> CliResult<KeypointSchema> {
        Ok(KeypointSchema::resolve(&self.schema)?)
    }

    pub fn resolve_model(&self, schema: &KeypointSchema) -> CliResult<ModelConfig> {
        let k = schema.num_keypoints();
        let cfg = match &self.model {
            ModelSpec::Preset { preset } => ModelConfig::preset(preset, k)
                .ok_or_else(|| CliError::Usage(format!("unknown model preset {preset:?}")))?,
            ModelSpec::Explicit(cfg) => cfg.clone(),
        };
        if cfg.num_keypoints != k {
            return Err(CliError::Usage(format!(
                "model predicts {} keypoints but schema {} has {k}",
                cfg.num_keypoints, schema.name
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

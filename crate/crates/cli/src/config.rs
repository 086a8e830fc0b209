use std::path::{Path, PathBuf};

use echat_core::connector::ConnectorConfig;
use echat_core::decoder::DecoderConfig;
use echat_core::encoder::EncoderConfig;
use echat_core::model::ModelConfig;
use echat_core::train::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with from a JSON file. Command-line
/// flags override individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub connector: ConnectorConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Directory holding `train.jsonl` / `valid.jsonl` / `test.jsonl`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        cfg.model()
            .validate()
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            connector: self.connector,
            decoder: self.decoder,
        }
    }
}

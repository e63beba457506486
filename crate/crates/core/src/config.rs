//! The single run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Result, UifmError};
use crate::hybrid::{EmbeddingMode, HybridConfig};
use crate::model::ModelConfig;
use crate::schema::SplitConfig;
use crate::synth::GrammarSpec;
use crate::tokenizer::TokenizerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory holding `schema.json`, `sessions.csv`, `metadata.csv`
    /// (and `churn.csv` for the churn probe).
    pub data: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data: PathBuf::from("data") }
    }
}

/// Every knob of the pipeline. Unknown keys are rejected; missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tokenizer: TokenizerConfig,
    pub hybrid: HybridConfig,
    pub backbone: BackboneConfig,
    pub init_std: f64,
    pub mode: EmbeddingMode,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub grammar: GrammarSpec,
    pub num_sessions: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        RunConfig {
            tokenizer: m.tokenizer,
            hybrid: m.hybrid,
            backbone: m.backbone,
            init_std: m.init_std,
            mode: EmbeddingMode::Full,
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            grammar: GrammarSpec::default(),
            num_sessions: 5000,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| UifmError::MissingInput(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| UifmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig { tokenizer: self.tokenizer, hybrid: self.hybrid, backbone: self.backbone, init_std: self.init_std }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate(self.backbone.max_positions)?;
        self.grammar.validate()?;
        if self.num_sessions == 0 {
            return Err(UifmError::Config("num_sessions must be >= 1".into()));
        }
        Ok(())
    }

    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.tokenizer = TokenizerConfig { d_cat: 8, d_num: 4, d_time: 4, d_model: 16, mlp_hidden: 16 };
        c.hybrid = HybridConfig { side_cat_width: 4, side_num_width: 4, meta_hidden: 8 };
        c.backbone = BackboneConfig {
            d_model: 16,
            num_layers: 1,
            num_heads: 2,
            window: 3,
            ffn_width: 32,
            dropout_rate: 0.0,
            max_positions: 16,
        };
        c.train.max_seq_len = 16;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"batch_sise": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("batch_sise"));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"seed": 9}}"#).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        c.validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut c = RunConfig::default();
        c.tokenizer.d_model = 32;
        assert!(c.validate().is_err());
    }
}

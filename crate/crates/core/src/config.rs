//! The single JSON run configuration shared by every front-end command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DataConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Longest CMC curve reported.
    pub max_rank: usize,
    /// Gallery images per ranking strip.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_rank: 20, top_k: 15 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.transformer.validate()?;
        self.train.validate()?;
        if self.eval.max_rank == 0 || self.eval.top_k == 0 {
            return Err(Error::Config("eval.max_rank and eval.top_k must be at least 1".into()));
        }
        if self.train.k > self.data.min_images_per_identity {
            return Err(Error::Config(format!(
                "train.k = {} exceeds data.min_images_per_identity = {}",
                self.train.k, self.data.min_images_per_identity
            )));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

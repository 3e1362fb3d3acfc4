//! Run configuration: one TOML document, every key optional.
//!
//! ```toml
//! seed = 0            # initialization and training seed
//! out = "runs/default"
//! ablation_seeds = 3
//!
//! [model]             # network shape, see LaNatConfig
//! model_dim = 64
//!
//! [data]              # synthetic corpus, see SyntheticSpec
//! seed = 0
//!
//! [train]             # schedule and optimizer, see TrainConfig
//! text_epochs = 200
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lanat_core::data::SyntheticSpec;
use lanat_core::model::LaNatConfig;
use lanat_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub ablation_seeds: usize,
    pub model: LaNatConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            ablation_seeds: 3,
            model: LaNatConfig::desk(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {}", e.message()))?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("config: cannot read {}", p.display()))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != self.data.vocab_size {
            anyhow::bail!(
                "config: model.vocab_size ({}) differs from data.vocab_size ({})",
                self.model.vocab_size,
                self.data.vocab_size
            );
        }
        if self.model.feature_dim != self.data.feature_dim {
            anyhow::bail!(
                "config: model.feature_dim ({}) differs from data.feature_dim ({})",
                self.model.feature_dim,
                self.data.feature_dim
            );
        }
        if self.ablation_seeds == 0 {
            anyhow::bail!("config: ablation_seeds must be >= 1");
        }
        Ok(())
    }
}

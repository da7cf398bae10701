//! Run configuration document.
//!
//! One TOML file drives every command; unknown keys are rejected and each run
//! writes the fully resolved document next to its outputs so results can be
//! reproduced from the artifact directory alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::correlation::CorrConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::phantom::PhantomSpec;
use crate::refiner::RefinerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Parameter initialization seed.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub correlation: CorrConfig,
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            correlation: self.correlation.clone(),
            refiner: self.refiner.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.phantom.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_toml())?)
    }
}

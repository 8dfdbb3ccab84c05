//! Root configuration document consumed by the command-line tool.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{bail, Error, Result};
use crate::eval::{EvalConfig, ExtractorConfig};
use crate::genharness::DiTConfig;
use crate::model::ModelConfig;
use crate::sweep::HarnessSpec;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
    pub eval: EvalConfig,
    pub dit: DiTConfig,
    pub extractor: ExtractorConfig,
    /// Dataset behind the extractor, the DiT latents and the real references.
    pub harness_dataset: DatasetManifest,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetManifest::default(),
            eval: EvalConfig::default(),
            dit: DiTConfig::default(),
            extractor: ExtractorConfig::default(),
            harness_dataset: DatasetManifest::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Version {
                found: self.schema_version,
                expected: CONFIG_SCHEMA_VERSION,
            });
        }
        self.model.validate()?;
        self.train.validate()?;
        self.dit.validate()?;
        if self.model.latent_dim != self.dit.latent_channels || self.model.grid_side() != self.dit.latent_grid {
            bail!(
                Config,
                "model latents [{}, {g}, {g}] do not match the DiT harness [{}, {h}, {h}]",
                self.model.latent_dim,
                self.dit.latent_channels,
                g = self.model.grid_side(),
                h = self.dit.latent_grid
            );
        }
        Ok(())
    }

    pub fn harness(&self) -> HarnessSpec {
        HarnessSpec {
            dit: self.dit.clone(),
            extractor: self.extractor.clone(),
            eval: self.eval.clone(),
            dataset: self.harness_dataset.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_parse_back() {
        let d = Config::default();
        d.validate().unwrap();
        let back: Config = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
        let partial: Config = serde_json::from_str(r#"{"train": {"lr": 0.002}}"#).unwrap();
        assert_eq!(partial.train.lr, 0.002);
        assert_eq!(partial.model, d.model);
        assert!(serde_json::from_str::<Config>(r#"{"trian": {}}"#).is_err());
    }
}

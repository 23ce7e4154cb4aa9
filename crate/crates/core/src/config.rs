//! Run configuration shared by the library entry points and the CLI.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::evalharness::SweepConfig;
use crate::policy::SamplerConfig;
use crate::predictor::TrainConfig;
use crate::rewards::RewardConfig;
use crate::synthgen::SynthConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CONFIG_HASH_FILE: &str = "config_hash.txt";

/// Hex SHA-256 of `data`.
pub fn content_hash(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub reward: RewardConfig,
    pub sampler: SamplerConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Sets one dotted key, e.g. `train.epochs=20`. The value is parsed as a
    /// TOML value, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*part))
                .ok_or_else(|| Error::Config(format!("unknown config section in {key:?}")))?;
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?} does not name a field")))?
            .insert(parts[parts.len() - 1].to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.reward.weights.validate()?;
        self.sampler.validate()?;
        self.baseline.validate()?;
        self.train.validate()?;
        self.sweep.validate()
    }

    /// Hash of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        content_hash(self.to_toml_string().as_bytes())
    }

    /// Writes the resolved config and its hash into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<String> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = self.to_toml_string();
        let hash = content_hash(text.as_bytes());
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(CONFIG_HASH_FILE);
        fs::write(&p, format!("{hash}\n")).map_err(|e| Error::io(&p, e))?;
        Ok(hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Budget;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.sampler.interleave_epochs = Some(5);
        cfg.sweep.eval_folds = Some(vec![0, 2]);
        cfg.train.lr0 = 0.1 + 0.2;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nepochs = 7\n[sampler]\nbudget = { count = 40 }\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.sampler.budget, Budget::Count(40));
        assert_eq!(cfg.reward, RewardConfig::default());
        assert!(matches!(RunConfig::from_toml_str("[trian]\nepochs = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("train.epochs=12").unwrap();
        cfg.set("reward.spatial_mode=corrected").unwrap();
        cfg.set("sweep.ratios=[0.5]").unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.reward.spatial_mode, crate::rewards::SpatialMode::Corrected);
        assert_eq!(cfg.sweep.ratios, vec![0.5]);
        assert!(cfg.set("train.epochs=many").is_err());
        assert!(cfg.set("nosuch.key=1").is_err());
        assert!(cfg.set("epochs").is_err());
    }
}

//! Top-level run configuration and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::synthworld::WorldConfig;
use crate::traineval::{AblationConfig, Schedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out episodes per evaluation.
    pub episodes: usize,
    pub k_percents: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            k_percents: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationSettings,
}

impl RunConfig {
    /// Early-classification preset: clip world, one-step horizon, shorter
    /// schedule.
    pub fn clip() -> Self {
        let world = WorldConfig::clip();
        Self {
            model: ModelConfig {
                horizon: world.horizon,
                ..ModelConfig::default()
            },
            schedule: Schedule {
                cosine_steps: 2800,
                ..Schedule::default()
            },
            world,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        let (w, m) = (&self.world, &self.model);
        if w.num_classes != m.num_classes {
            return Err(Error::Config(format!(
                "world has {} classes, model {}",
                w.num_classes, m.num_classes
            )));
        }
        if w.horizon != m.horizon {
            return Err(Error::Config(format!(
                "world horizon {} differs from model horizon {}",
                w.horizon, m.horizon
            )));
        }
        if w.feature_dim != m.d_h {
            return Err(Error::Config(format!(
                "feature_dim {} must equal d_h {}",
                w.feature_dim, m.d_h
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            variants: self.ablation.variants.clone(),
            seeds: self.ablation.seeds.clone(),
            world: self.world.clone(),
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            train: self.train.clone(),
            eval_episodes: self.eval.episodes,
            k_percents: self.eval.k_percents.clone(),
        }
    }
}

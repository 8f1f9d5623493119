//! Run configuration: one JSON document, every section optional.

use std::path::{Path, PathBuf};

use pgc_core::density::SceneConfig;
use pgc_core::penet::{phase_trainer_defaults, PenetConfig, Phase3Mode};
use pgc_core::pgc_net::{NetworkConfig, TrainerConfig};
use pgc_core::DictionaryConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub dictionary: DictionaryConfig,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub synth: SynthSection,
    pub penet: PenetSection,
    /// Scene set for train, eval and penet.
    pub data: Option<PathBuf>,
    /// Held-out scene set for train and penet reports.
    pub test_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub scenes: usize,
    pub min_heads: usize,
    pub max_heads: usize,
    /// Template for every scene; `count` and `seed` are drawn per scene.
    pub scene: SceneConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            scenes: 200,
            min_heads: 5,
            max_heads: 40,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenetSection {
    pub config: PenetConfig,
    /// Synthetic perspective maps added to the data perspectives for phase 1.
    pub synthetic_maps: usize,
    pub phase1: TrainerConfig,
    pub phase2: TrainerConfig,
    pub phase3: TrainerConfig,
    pub variant: Phase3Mode,
    pub i2p_weight: f64,
}

impl Default for PenetSection {
    fn default() -> Self {
        Self {
            config: PenetConfig::default(),
            synthetic_maps: 16,
            phase1: phase_trainer_defaults(),
            phase2: TrainerConfig {
                epochs: 10,
                ..phase_trainer_defaults()
            },
            phase3: TrainerConfig {
                learning_rate: 5e-4,
                epochs: 20,
                ..TrainerConfig::default()
            },
            variant: Phase3Mode::JointEstimator,
            i2p_weight: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de).map_err(|e| {
                    CliError::Usage(format!("--config {}: at `{}`: {}", p.display(), e.path(), e.inner()))
                })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let at = |section: &str, r: pgc_core::Result<()>| r.map_err(|e| CliError::Usage(format!("config `{section}`: {e}")));
        at("dictionary", self.dictionary.validate())?;
        at("network", self.network.validate())?;
        at("trainer", self.trainer.validate())?;
        at("penet.config", self.penet.config.validate())?;
        at("penet.phase1", self.penet.phase1.validate())?;
        at("penet.phase2", self.penet.phase2.validate())?;
        at("penet.phase3", self.penet.phase3.validate())?;
        if self.synth.min_heads > self.synth.max_heads {
            return Err(CliError::Usage("config `synth`: min_heads exceeds max_heads".into()));
        }
        Ok(())
    }
}

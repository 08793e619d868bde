//! Serialized trained models (JSON).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{NoiseModel, PriorParams};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{NetConfig, NetWeights};
use crate::train::{HorizonDist, MetaTrainConfig};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    /// SHA-256 of the canonical training configuration.
    pub config_hash: String,
    /// `alpaca` or `alpaca-no-meta`.
    pub variant: String,
    pub iterations: usize,
    pub final_loss: Option<f64>,
}

impl TrainingMetadata {
    pub fn for_config(config: &MetaTrainConfig, final_loss: Option<f64>) -> Self {
        TrainingMetadata {
            seed: config.seed,
            config_hash: config_hash(config),
            variant: match config.horizon_dist {
                HorizonDist::Uniform => "alpaca",
                HorizonDist::Zero => "alpaca-no-meta",
            }
            .to_string(),
            iterations: config.iterations,
            final_loss,
        }
    }
}

pub fn config_hash(config: &MetaTrainConfig) -> String {
    let text = crate::config::train_config_text(config);
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub net_config: NetConfig,
    pub net: NetWeights,
    pub kbar0: Matrix,
    pub l0: Matrix,
    pub sigma_eps: Matrix,
    pub metadata: TrainingMetadata,
}

impl ModelFile {
    pub fn new(prior: &PriorParams, net_config: NetConfig, metadata: TrainingMetadata) -> Result<Self> {
        let m = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            net_config,
            net: prior.net.clone(),
            kbar0: prior.kbar0.clone(),
            l0: prior.l0.clone(),
            sigma_eps: prior.noise.sigma().clone(),
            metadata,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        self.net_config.validate()?;
        self.net.check(&self.net_config)?;
        self.to_prior().map(|_| ())
    }

    pub fn to_prior(&self) -> Result<PriorParams> {
        PriorParams::new(
            self.kbar0.clone(),
            self.l0.clone(),
            self.net.clone(),
            NoiseModel::new(self.sigma_eps.clone())?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

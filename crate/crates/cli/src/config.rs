//! Run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sonotext::audio::FrontendConfig;
use sonotext::experiments::{AblationConfig, WorldConfig};
use sonotext::model::{DecodeConfig, ModelConfig, OptimConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookSettings {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CodebookSettings {
    fn default() -> Self {
        Self {
            k: 1024,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSettings {
    pub alpha: f64,
    /// Task chains, e.g. `["ASR", "AST", "ASR AST"]`.
    pub chains: Vec<String>,
}

impl Default for MixtureSettings {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            chains: vec!["ASR".into(), "AST".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            optim: OptimConfig::default(),
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub language: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            language: "English".into(),
        }
    }
}

/// Every section is optional; `seed` is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub frontend: FrontendConfig,
    #[serde(default)]
    pub codebook: CodebookSettings,
    #[serde(default)]
    pub mixture: MixtureSettings,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub synth: WorldConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            frontend: FrontendConfig::default(),
            codebook: CodebookSettings::default(),
            mixture: MixtureSettings::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            decode: DecodeConfig::default(),
            eval: EvalSettings::default(),
            synth: WorldConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required_and_unknown_keys_rejected() {
        assert!(RunConfig::from_toml("").is_err());
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(RunConfig::from_toml("seed = 1\n[model]\nlayerz = 2").is_err());
        let c = RunConfig::from_toml("seed = 3\n[codebook]\nk = 64").unwrap();
        assert_eq!(c.codebook.k, 64);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.optim.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}

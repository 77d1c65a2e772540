//! Run configuration: one root seed, dataset sizes, model dimensions, loss
//! hyperparameters, collection settings, and stage step counts. The canonical
//! JSON form is hashed and the hash stamps every artifact of a run.

use crate::collect::CollectConfig;
use crate::error::{Error, Result};
use crate::losses::PreferenceHyper;
use crate::maskops::BandWidth;
use crate::toymodel::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub model: ModelConfig,
    pub hyper: PreferenceHyper,
    /// Perturbed images per collection round.
    pub n_perturb: usize,
    /// Regeneration cap for localization-phase collection.
    pub max_rounds: usize,
    pub noise_sigma: f64,
    /// Boundary band width; `None` uses 2% of the raster diagonal.
    pub band_width: Option<usize>,
    /// Responses generated per input during ensemble fusion.
    pub k_responses: usize,
    pub sft_steps: usize,
    pub pref_steps: usize,
    pub ensemble_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stage-2 step size; preference finetuning destabilizes the tiny model
    /// at the SFT step size.
    pub pref_learning_rate: f64,
    /// Stage-3 step size for the prompt embeddings.
    pub ensemble_learning_rate: f64,
    pub mask_loss_weight: f64,
    /// Mask-loss weight during preference finetuning; the mask path keeps
    /// training at roughly its SFT rate while the text path stays gentle.
    pub pref_mask_loss_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            train_samples: 200,
            val_samples: 60,
            model: ModelConfig::default(),
            hyper: PreferenceHyper::default(),
            n_perturb: 30,
            max_rounds: 20,
            noise_sigma: 0.25,
            band_width: None,
            k_responses: 3,
            sft_steps: 6000,
            pref_steps: 1200,
            ensemble_steps: 1000,
            batch_size: 8,
            learning_rate: 3e-2,
            pref_learning_rate: 3e-4,
            ensemble_learning_rate: 1e-2,
            mask_loss_weight: 2.0,
            pref_mask_loss_weight: 10.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        self.collect_config().validate()?;
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::Config("dataset sizes must be at least 1".into()));
        }
        if self.k_responses == 0 || self.batch_size == 0 {
            return Err(Error::Config("k_responses and batch_size must be at least 1".into()));
        }
        if self.sft_steps == 0 || self.pref_steps == 0 || self.ensemble_steps == 0 {
            return Err(Error::Config("stage step counts must be at least 1".into()));
        }
        if self.learning_rate <= 0.0
            || self.pref_learning_rate <= 0.0
            || self.ensemble_learning_rate <= 0.0
            || self.mask_loss_weight <= 0.0
        {
            return Err(Error::Config("learning rate and loss weights must be positive".into()));
        }
        Ok(())
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            n_perturb: self.n_perturb,
            max_rounds: self.max_rounds,
            noise_sigma: self.noise_sigma,
            band_width: self.band_width,
            ..CollectConfig::default()
        }
    }

    pub fn band(&self) -> BandWidth {
        self.collect_config().band(self.model.grid, self.model.grid)
    }

    /// Canonical serialized form (field order fixed by the struct).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical form; stamps every artifact of a run.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig { seed: 18, ..RunConfig::default() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
        let bad = RunConfig { learning_rate: 0.0, ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_partial_overrides() {
        let json = r#"{ "seed": 99, "sft_steps": 10 }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.sft_steps, 10);
        assert_eq!(cfg.k_responses, RunConfig::default().k_responses);
    }
}

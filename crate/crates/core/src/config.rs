//! Run configuration as one TOML document.
//!
//! Every section has serde defaults, so a partial file only overrides what it
//! names. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::metrics::{MetricsConfig, SimConfig};
use crate::nn::AdamConfig;
use crate::objective::HyperParams;
use crate::trainer::{KMeansConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub shops: usize,
    pub buyers_per_shop: usize,
    pub n_products: usize,
    pub d_emb: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            shops: 12,
            buyers_per_shop: 420,
            n_products: 600,
            d_emb: 768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub codebook: CodebookConfig,
    pub objective: HyperParams,
    pub optimizer: AdamConfig,
    pub train: TrainConfig,
    pub kmeans: KMeansConfig,
    pub metrics: MetricsConfig,
    pub sim: SimConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            codebook: CodebookConfig::default(),
            objective: HyperParams::default(),
            optimizer: AdamConfig::default(),
            train: TrainConfig::default(),
            kmeans: KMeansConfig::default(),
            metrics: MetricsConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl Config {
    /// Small-embedding preset: 32-dimensional product embeddings projected
    /// to 16 PCA dims, trained for 200 epochs with light dropout.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.synth.d_emb = 32;
        c.features.d_pca = 16;
        c.train.epochs = 200;
        c.model.dropout = 0.05;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.train.validate()?;
        if self.features.d_pca == 0 || !(self.features.logit_eps > 0.0 && self.features.logit_eps < 0.5) {
            return Err(Error::Config("d_pca must be positive and logit_eps in (0, 0.5)".into()));
        }
        if self.features.d_pca > self.synth.d_emb {
            return Err(Error::Config(format!(
                "d_pca = {} exceeds d_emb = {}",
                self.features.d_pca, self.synth.d_emb
            )));
        }
        let cb = &self.codebook;
        if cb.size == 0 || cb.dim == 0 || !(0.0..=1.0).contains(&cb.decay) || cb.dead_fraction < 0.0 || cb.revival_noise < 0.0 {
            return Err(Error::Config("invalid codebook settings".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) || self.model.hidden.contains(&0) {
            return Err(Error::Config("invalid model settings".into()));
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if self.kmeans.k == 0 || self.kmeans.batch_size == 0 {
            return Err(Error::Config("k-means needs k and batch_size of at least 1".into()));
        }
        let sim = &self.sim;
        if !(0.0..=1.0).contains(&sim.prior_weight) || sim.engagement_lambda.iter().any(|l| !(*l >= 0.0)) || sim.sessions_per_cell == 0 {
            return Err(Error::Config("invalid simulator settings".into()));
        }
        if self.synth.shops == 0 || self.synth.buyers_per_shop == 0 || self.synth.n_products == 0 {
            return Err(Error::Config("synthetic population needs shops, buyers and products".into()));
        }
        self.metrics.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_override() {
        let c = Config::desk();
        let text = c.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
        let p = Config::from_toml("seed = 7\n[codebook]\nsize = 16\n").unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.codebook.size, 16);
        assert_eq!(p.codebook.dim, 96);
        assert_eq!(p.objective, HyperParams::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(Config::from_toml("sede = 1\n"), Err(Error::Config(_))));
        assert!(matches!(
            Config::from_toml("[objective]\ntop_m = 2\ntop_f = 3\n"),
            Err(Error::Config(_))
        ));
    }
}

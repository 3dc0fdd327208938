//! Run configuration. Defaults carry the published optimiser settings
//! (lr 1e-4, weight decay 5e-4, patience 15, 5 folds) and desk-scale
//! architecture sizes.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How equal predicted risks are scored by the concordance index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// `f_i > f_j` strictly; tied risks score 0.
    #[default]
    Strict,
    /// Tied risks score 1/2.
    Half,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of phenotype clusters and gene modules (C).
    pub phenotypes: usize,
    /// Patch feature dimension (d).
    pub patch_dim: usize,
    /// Phenotype / module embedding dimension (d_k).
    pub embed_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Transformer MLP hidden width as a multiple of `model_dim`.
    pub mlp_ratio: usize,
    /// Hidden width of each gene-module MLP.
    pub gene_hidden: usize,
    pub pool_heads: usize,
    /// Fraction of tokens kept by top-rank masking, in (0, 1].
    pub pool_ratio: f64,
    /// Renormalise masked attention rows to sum to one.
    pub pool_renormalize: bool,
    pub head_hidden: [usize; 2],
    /// Squash the risk score through a sigmoid.
    pub risk_sigmoid: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            phenotypes: 8,
            patch_dim: 32,
            embed_dim: 16,
            model_dim: 32,
            heads: 4,
            depth: 2,
            mlp_ratio: 2,
            gene_hidden: 16,
            pool_heads: 2,
            pool_ratio: 0.5,
            pool_renormalize: false,
            head_hidden: [64, 32],
            risk_sigmoid: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("phenotypes", self.phenotypes),
            ("patch_dim", self.patch_dim),
            ("embed_dim", self.embed_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("gene_hidden", self.gene_hidden),
            ("pool_heads", self.pool_heads),
            ("head_hidden[0]", self.head_hidden[0]),
            ("head_hidden[1]", self.head_hidden[1]),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(alloc::format!("{name} must be positive")));
            }
        }
        if self.depth < 1 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(alloc::format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim,
                self.heads
            )));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "pool_ratio must lie in (0, 1], got {}",
                self.pool_ratio
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Apply decay directly to the weights instead of adding `λ·θ` to the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decoupled_weight_decay: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    /// Share of the non-test patients held out for early stopping.
    pub validation_fraction: f64,
    pub tie_rule: TieRule,
    pub kmeans_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 300,
            patience: 15,
            folds: 5,
            validation_fraction: 0.25,
            tie_rule: TieRule::Strict,
            kmeans_max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl RunConfig {
    /// Pooling ratio 0.5, as used for the breast-cancer cohort.
    pub fn brca() -> Self {
        let mut c = Self::default();
        c.model.pool_ratio = 0.5;
        c
    }

    /// Pooling ratio 0.9, as used for the lung-adenocarcinoma cohort.
    pub fn luad() -> Self {
        let mut c = Self::default();
        c.model.pool_ratio = 0.9;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if t.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if t.max_epochs < 1 || t.kmeans_max_iter < 1 {
            return Err(Error::Config("max_epochs and kmeans_max_iter must be positive".into()));
        }
        if !(t.validation_fraction > 0.0 && t.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0) || o.weight_decay < 0.0 || o.epsilon <= 0.0 {
            return Err(Error::Config("invalid optimiser settings".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

//! Experiment configuration, read from TOML.

use std::path::Path;

use hardcase::curricula::StrategySpec;
use hardcase::difficulty::DifficultyConfig;
use hardcase::embedding::EmbeddingConfig;
use hardcase::trainer::TrainConfig;
use hardcase::world::{KnobDistribution, PlannerProfile};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base of the corpus seed ranges, the label draw and the agent seeds.
    #[serde(default)]
    pub seed: u64,
    pub corpus: CorpusSizes,
    #[serde(default)]
    pub knobs: KnobDistribution,
    #[serde(default = "default_profiles")]
    pub profiles: Vec<NamedProfile>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub difficulty: DifficultyConfig,
    #[serde(default)]
    pub buckets: BucketConfig,
    #[serde(default)]
    pub training: TrainConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub train: u64,
    pub validation: u64,
    pub test: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedProfile {
    pub name: String,
    #[serde(flatten)]
    pub profile: PlannerProfile,
}

fn default_profiles() -> Vec<NamedProfile> {
    PlannerProfile::labeling_set().into_iter().map(|(name, profile)| NamedProfile { name, profile }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketConfig {
    pub shard_size: usize,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self { shard_size: hardcase::buckets::DEFAULT_SHARD_SIZE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub strategy: StrategySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: u64,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Size of the uniform test draw.
    pub unbiased: usize,
    pub rollouts: usize,
    /// Validation segments kept per training bucket.
    pub validation_per_bucket: usize,
    /// Training-score quantile above which test segments form the long tail.
    pub tail_quantile: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { unbiased: 2000, rollouts: hardcase::eval::DEFAULT_ROLLOUTS, validation_per_bucket: 20, tail_quantile: 0.99 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.corpus.train == 0 || self.corpus.validation == 0 || self.corpus.test == 0 {
            return bad("corpus sizes must be positive".into());
        }
        if self.profiles.len() < 2 {
            return bad("at least two planner profiles are needed".into());
        }
        for p in &self.profiles {
            p.profile.validate().map_err(|e| CliError::Config(format!("profile {}: {e}", p.name)))?;
        }
        if self.sweep.seeds == 0 {
            return bad("sweep.seeds must be positive".into());
        }
        let mut names: Vec<&str> = self.sweep.variants.iter().map(|v| v.name.as_str()).collect();
        if names.iter().any(|n| n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
            return bad("variant names must be non-empty and use only [A-Za-z0-9_-]".into());
        }
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate variant name".into());
        }
        if self.eval.unbiased == 0 || self.eval.rollouts == 0 || self.eval.validation_per_bucket == 0 {
            return bad("eval sizes must be positive".into());
        }
        if !(self.eval.tail_quantile > 0.0 && self.eval.tail_quantile < 1.0) {
            return bad(format!("tail_quantile must be in (0, 1), got {}", self.eval.tail_quantile));
        }
        self.training.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.sweep.variants.iter().find(|v| v.name == name)
    }

    /// Agent seeds of the sweep.
    pub fn agent_seeds(&self) -> Vec<u64> {
        (0..self.sweep.seeds).map(|i| self.seed + i).collect()
    }
}

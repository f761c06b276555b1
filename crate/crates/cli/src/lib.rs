//! Config-driven pipeline: corpora, counterfactual labels, embedding and
//! difficulty models, decile buckets, curriculum training sweeps,
//! evaluation and the report.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use hardcase::curricula::StrategySpec;

pub use artifacts::Workspace;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::Pipeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Label,
    TrainEmbedding,
    TrainDifficulty,
    Score,
    Bucketize,
    TrainAgent,
    Eval,
    Report,
    All,
}

/// Command-line settings layered over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Sweep size for train-agent and eval.
    pub seeds: Option<u64>,
    /// Variant names, or strategy kinds to add as variants of that name.
    pub strategies: Vec<String>,
}

impl Overrides {
    /// Applies the overrides; returns the variant names they select.
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<Vec<String>> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.seeds {
            cfg.sweep.seeds = n;
        }
        for name in &self.strategies {
            if cfg.variant(name).is_none() {
                let strategy: StrategySpec = serde_json::from_value(serde_json::json!({ "kind": name }))
                    .map_err(|e| CliError::Config(format!("--strategy {name}: {e}")))?;
                cfg.sweep.variants.push(config::Variant { name: name.clone(), strategy });
            }
        }
        cfg.validate()?;
        Ok(self.strategies.clone())
    }
}

pub struct Invocation {
    pub config: PathBuf,
    pub out: PathBuf,
    pub workers: usize,
    pub force: bool,
    pub overrides: Overrides,
}

pub fn execute(cmd: Command, inv: &Invocation) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&inv.config)?;
    let names = inv.overrides.apply(&mut cfg)?;
    let p = Pipeline::new(cfg, Workspace::new(&inv.out, inv.force), inv.workers)?;
    let selected = p.variants(&names)?;
    match cmd {
        Command::GenData => p.gen_data(),
        Command::Label => p.label(),
        Command::TrainEmbedding => p.train_embedding(),
        Command::TrainDifficulty => p.train_difficulty(),
        Command::Score => p.score(),
        Command::Bucketize => p.bucketize(),
        Command::TrainAgent => p.train_agents(&selected),
        Command::Eval => p.eval(&selected),
        Command::Report => p.report(),
        Command::All => p.run_all(),
    }
}

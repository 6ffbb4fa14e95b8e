//! Synthetic task suites, demonstrations, action tokenization and the
//! context/target banks.
//!
//! Four in-domain suites vary one axis each across their variants (action
//! goal, observation shift, observed subspace, and a long-horizon suite with
//! mixed shifts). Auxiliary tasks see the world through rotated cameras or act
//! with twice the degrees of freedom; they enter training only as context,
//! except in the naive mixing regime.

mod bank;
mod task;
mod tokenize;

pub use bank::{
    sample_target_batch, split_banks, Banks, ContextBank, ContextProtocol, ContextSource, PoolKind,
    SuitePools, TargetBank, TargetMix, TaskPool, SEED_STRIDE,
};
pub use task::{
    gen_episode, make_benchmark, Adapter, Benchmark, BenchmarkConfig, Domain, Episode, EpisodeId,
    Policy, PoolSizes, TaskSpec, BIMANUAL, LONG_SUITE, SUITES,
};
pub use tokenize::{bin_center, bin_index, detokenize_actions, tokenize_actions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk benchmark definition: generator settings plus the explicit task
/// list they produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkDoc {
    pub config: BenchmarkConfig,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

impl BenchmarkDoc {
    pub fn generate(config: BenchmarkConfig) -> Result<Self> {
        let tasks = make_benchmark(&config)?;
        Ok(BenchmarkDoc { config, tasks })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: BenchmarkDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        doc.config.validate()?;
        for t in &doc.tasks {
            t.validate()?;
        }
        Ok(doc)
    }

    /// Materializes the benchmark; an empty task list means "generate from
    /// the config".
    pub fn build(self) -> Result<Benchmark> {
        if self.tasks.is_empty() {
            Benchmark::new(self.config)
        } else {
            Benchmark::from_tasks(self.config, self.tasks)
        }
    }
}

#[cfg(test)]
mod tests;

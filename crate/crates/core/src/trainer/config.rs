use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::banks::{Benchmark, BenchmarkConfig, ContextProtocol, ContextSource};
use crate::error::{Error, Result};
use crate::mar::{MarConfig, MarVariant};
use crate::nets::NetConfig;

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One suite, bare decoder.
    PerTaskSft,
    /// All in-domain suites, bare decoder.
    MultitaskSft,
    /// In-domain suites and auxiliary tasks mixed into the targets.
    MultitaskSftAux,
    /// Decoder plus deterministic memory.
    MetaDet,
    /// Decoder plus memory with the latent path.
    MetaStoch,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::PerTaskSft,
        Mode::MultitaskSft,
        Mode::MultitaskSftAux,
        Mode::MetaDet,
        Mode::MetaStoch,
    ];

    pub fn is_meta(self) -> bool {
        matches!(self, Mode::MetaDet | Mode::MetaStoch)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::PerTaskSft => "per_task_sft",
            Mode::MultitaskSft => "multitask_sft",
            Mode::MultitaskSftAux => "multitask_sft_aux",
            Mode::MetaDet => "meta_det",
            Mode::MetaStoch => "meta_stoch",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown mode {s:?} (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Suite trained in `per_task_sft`.
    pub suite: Option<String>,
    /// Weight of each auxiliary task relative to one in-domain suite in
    /// `multitask_sft_aux` batches.
    pub aux_weight: f64,
    pub context: ContextProtocol,
    /// KL weight for `meta_stoch`.
    pub beta: f64,
    pub net: NetConfig,
    pub mar: MarConfig,
    pub benchmark: BenchmarkConfig,
    /// Steps between metrics records.
    pub metrics_every: u64,
    /// Steps between intermediate checkpoints (none when zero).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::MetaDet,
            steps: 3000,
            batch_size: 32,
            lr: 5e-4,
            seed: 0,
            suite: None,
            aux_weight: 1.0,
            context: ContextProtocol::default(),
            beta: 1.0,
            net: NetConfig::default(),
            mar: MarConfig::default(),
            benchmark: BenchmarkConfig::default(),
            metrics_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Memory settings with the variant and KL weight implied by the mode.
    pub fn mar_config(&self) -> MarConfig {
        MarConfig {
            variant: if self.mode == Mode::MetaStoch {
                MarVariant::Stochastic
            } else {
                MarVariant::Deterministic
            },
            beta: self.beta,
            ..self.mar.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.benchmark.validate()?;
        if self.batch_size == 0 || self.metrics_every == 0 {
            return Err(Error::Config("batch_size and metrics_every must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.aux_weight > 0.0) || !self.aux_weight.is_finite() {
            return Err(Error::Config("aux_weight must be positive".into()));
        }
        if self.net.d_model != self.benchmark.adapter_dim {
            return Err(Error::Config(format!(
                "d_model {} differs from the benchmark adapter width {}",
                self.net.d_model, self.benchmark.adapter_dim
            )));
        }
        if self.net.vocab_size != self.benchmark.vocab_size {
            return Err(Error::Config(format!(
                "decoder vocabulary {} differs from the benchmark's {}",
                self.net.vocab_size, self.benchmark.vocab_size
            )));
        }
        if self.net.n_instructions < self.benchmark.n_tasks() {
            return Err(Error::Config(format!(
                "{} instruction codes cannot name {} tasks",
                self.net.n_instructions,
                self.benchmark.n_tasks()
            )));
        }
        match (self.mode, &self.suite) {
            (Mode::PerTaskSft, None) => {
                return Err(Error::Config("per_task_sft needs a suite".into()));
            }
            (Mode::PerTaskSft, Some(_)) | (_, None) => {}
            (_, Some(_)) => {
                return Err(Error::Config("suite applies to per_task_sft only".into()));
            }
        }
        if self.mode.is_meta() {
            self.mar_config().validate(self.net.d_model)?;
            if self.context.bc == 0 || self.context.k == 0 {
                return Err(Error::Config("meta modes need positive b_C and K".into()));
            }
            if self.context.bc > self.benchmark.pools.context
                && self.context.source != ContextSource::Stale
            {
                return Err(Error::Config(format!(
                    "b_C {} exceeds the context pool size {}",
                    self.context.bc, self.benchmark.pools.context
                )));
            }
        }
        Ok(())
    }

    /// Checks the parts of the config that depend on the materialized tasks.
    pub fn validate_against(&self, bench: &Benchmark) -> Result<()> {
        if bench.max_positions() > self.net.max_positions {
            return Err(Error::Config(format!(
                "tasks need {} positions, decoder has {}",
                bench.max_positions(),
                self.net.max_positions
            )));
        }
        if let Some(s) = &self.suite {
            if !bench.in_domain_suites().contains(s) {
                return Err(Error::Config(format!("unknown suite {s:?}")));
            }
        }
        Ok(())
    }
}

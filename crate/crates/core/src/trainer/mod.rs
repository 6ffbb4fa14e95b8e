//! Training loops for the five regimes, metrics logging and checkpoints.
//!
//! Randomness is split into named streams derived from the run seed: `init`
//! (parameters), `batch` (target sampling), `context` (refreshes) and `noise`
//! (latent samples). Two runs that share a seed and differ only in a setting
//! that one stream never sees draw identical values from the others.

pub mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState};
pub use config::{Mode, TrainConfig};
pub use metrics::{
    argmax, compute_metrics, parse_metrics_jsonl, MetricsRecord, MetricsSink, TokenStats,
    CSV_HEADER,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::banks::{sample_target_batch, split_banks, Banks, Benchmark, Episode, EpisodeId, TargetMix};
use crate::diffcore::{adam_step, AdamConfig, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::mar::{self, ContextPairs};
use crate::nets::{self, EpisodeTokens};
use crate::seeds;

pub const STREAMS: [&str; 4] = ["init", "batch", "context", "noise"];

/// The run's named random streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Streams {
    pub init: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub context: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let s = |name: &str| seeds::rng(&[seed, seeds::label(name)]);
        Streams {
            init: s("init"),
            batch: s("batch"),
            context: s("context"),
            noise: s("noise"),
        }
    }

    pub fn capture(&self) -> BTreeMap<String, RngState> {
        [
            ("init", &self.init),
            ("batch", &self.batch),
            ("context", &self.context),
            ("noise", &self.noise),
        ]
        .into_iter()
        .map(|(k, r)| (k.to_string(), RngState::capture(r)))
        .collect()
    }

    pub fn restore(states: &BTreeMap<String, RngState>) -> std::result::Result<Self, CheckpointError> {
        let get = |name: &str| {
            states
                .get(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing rng stream {name}")))?
                .restore()
        };
        Ok(Streams {
            init: get("init")?,
            batch: get("batch")?,
            context: get("context")?,
            noise: get("noise")?,
        })
    }
}

/// Fresh parameters for a config: the backbone, plus the memory module in
/// meta modes.
pub fn init_model(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    nets::init_backbone(&mut store, &cfg.net, rng)?;
    if cfg.mode.is_meta() {
        mar::init_mar(&mut store, &cfg.mar_config(), cfg.net.d_model, cfg.net.mlp_ratio, rng)?;
    }
    Ok(store)
}

/// Mutable part of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Steps completed.
    pub step: u64,
    pub store: ParameterStore,
    pub streams: Streams,
    /// Encodings of the active context set, refreshed with it.
    pub context_pairs: Option<ContextPairs>,
    /// Calls made to the context refresh hook.
    pub refresh_calls: u64,
    /// Episodes of the most recent target batch (not persisted).
    pub last_batch: Vec<EpisodeId>,
}

/// Context-pair encodings of the bank's active set under the current
/// parameters.
pub fn encode_active_context(
    store: &ParameterStore,
    cfg: &TrainConfig,
    bench: &Benchmark,
    banks: &Banks,
) -> Result<ContextPairs> {
    let tokens: Vec<EpisodeTokens> = banks.context.active().map(|e| bench.tokens(e)).collect();
    mar::encode_pairs(store, &cfg.net, &tokens, &banks.context.active_tasks())
}

fn target_mix<'b>(cfg: &TrainConfig, banks: &'b Banks) -> Result<TargetMix<'b>> {
    Ok(match cfg.mode {
        Mode::PerTaskSft => {
            let name = cfg.suite.as_deref().unwrap_or_default();
            let idx = banks
                .target
                .suite_index(name)
                .ok_or_else(|| Error::Config(format!("unknown suite {name:?}")))?;
            TargetMix::Suite(idx)
        }
        Mode::MultitaskSftAux => TargetMix::WithAuxiliary {
            pools: &banks.auxiliary,
            aux_weight: cfg.aux_weight,
        },
        Mode::MultitaskSft | Mode::MetaDet | Mode::MetaStoch => TargetMix::AllSuites,
    })
}

/// One optimizer step. Returns statistics of the batch under the parameters
/// before the update.
pub fn train_step(
    state: &mut TrainState,
    banks: &mut Banks,
    bench: &Benchmark,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let t0 = Instant::now();
    let step = state.step;
    if cfg.mode.is_meta() {
        state.refresh_calls += 1;
        if banks.context.refresh_context(step, &mut state.streams.context) {
            state.context_pairs = Some(encode_active_context(&state.store, cfg, bench, banks)?);
        }
    }
    let mix = target_mix(cfg, banks)?;
    let batch: Vec<&Episode> =
        sample_target_batch(&banks.target, cfg.batch_size, &mut state.streams.batch, mix)?;
    let tokens: Vec<EpisodeTokens> = batch.iter().map(|e| bench.tokens(e)).collect();
    let truth: Vec<f64> = batch.iter().flat_map(|e| e.actions.iter().copied()).collect();
    state.last_batch = batch.iter().map(|e| e.id()).collect();

    let mut tape = Tape::new();
    let (loss, logits, targets) = if cfg.mode.is_meta() {
        let context = state
            .context_pairs
            .as_ref()
            .ok_or_else(|| Error::Protocol("meta step without an encoded context set".into()))?;
        let mcfg = cfg.mar_config();
        let noise = mcfg
            .stochastic()
            .then(|| Tensor::randn(&[tokens.len(), mcfg.d_latent], 1.0, &mut state.streams.noise));
        let fwd = mar::meta_forward(
            &mut tape,
            &state.store,
            &cfg.net,
            &mcfg,
            &tokens,
            context,
            noise.as_ref(),
        )?;
        (fwd.loss.total, fwd.logits, fwd.targets)
    } else {
        let dec = nets::decode_batch(&mut tape, &state.store, &cfg.net, &tokens)?;
        let logits = tape.gather_rows(dec.logits, dec.predict_rows.clone())?;
        let mask = vec![true; dec.targets.len()];
        let loss = tape.cross_entropy(logits, &dec.targets, &mask)?;
        (loss, logits, dec.targets)
    };
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: loss_value,
            step,
            mode: cfg.mode.to_string(),
            seed: cfg.seed,
        });
    }
    let stats = compute_metrics(tape.value(logits), &targets, &truth)?;
    tape.backward(loss, &mut state.store)?;
    adam_step(&mut state.store, &AdamConfig::with_lr(cfg.lr));
    state.step += 1;
    Ok(MetricsRecord {
        step,
        accuracy: stats.accuracy,
        imitation_loss: stats.imitation_loss,
        l1_loss: stats.l1_loss,
        ms_per_step: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// A run: config, materialized benchmark and pools, and mutable state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub bench: Benchmark,
    pub banks: Banks,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let bench = Benchmark::new(config.benchmark.clone())?;
        Self::with_benchmark(config, bench)
    }

    /// Uses an explicit task list instead of generating one.
    pub fn with_benchmark(config: TrainConfig, bench: Benchmark) -> Result<Self> {
        config.validate()?;
        config.validate_against(&bench)?;
        let banks = split_banks(&bench, &config.context)?;
        banks.audit_disjoint()?;
        let mut streams = Streams::new(config.seed);
        let store = init_model(&config, &mut streams.init)?;
        Ok(Trainer {
            config,
            bench,
            banks,
            state: TrainState {
                step: 0,
                store,
                streams,
                context_pairs: None,
                refresh_calls: 0,
                last_batch: Vec::new(),
            },
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.config.clone())?;
        ck.check_shapes(&t.state.store)?;
        t.banks.context.restore(ck.context_active, ck.context_refreshes)?;
        t.state = TrainState {
            step: ck.step,
            store: ck.store,
            streams: Streams::restore(&ck.rngs)?,
            context_pairs: ck.context_pairs,
            refresh_calls: ck.refresh_calls,
            last_batch: Vec::new(),
        };
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (active, refreshes) = self.banks.context.state();
        Checkpoint {
            config: self.config.clone(),
            step: self.state.step,
            store: self.state.store.clone(),
            rngs: self.state.streams.capture(),
            context_active: active,
            context_refreshes: refreshes,
            context_pairs: self.state.context_pairs.clone(),
            refresh_calls: self.state.refresh_calls,
        }
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        train_step(&mut self.state, &mut self.banks, &self.bench, &self.config)
    }

    fn should_record(&self, step: u64) -> bool {
        step % self.config.metrics_every == 0 || step + 1 == self.config.steps
    }

    /// Steps until `until` steps are complete, returning the records due on
    /// the way. Writes them to `out` and saves intermediate checkpoints there
    /// when given.
    pub fn run_until(&mut self, until: u64, out: Option<&Path>) -> Result<Vec<MetricsRecord>> {
        let mut sink = match out {
            Some(dir) => Some(MetricsSink::open(dir, self.state.step > 0)?),
            None => None,
        };
        let mut records = Vec::new();
        while self.state.step < until {
            let rec = self.step()?;
            if self.should_record(rec.step) {
                if let Some(s) = sink.as_mut() {
                    s.write(&rec)?;
                }
                records.push(rec);
            }
            let done = self.state.step;
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && done % every == 0 && done < until {
                    save_checkpoint(&self.checkpoint(), &dir.join(format!("step-{done}.ckpt")))?;
                }
            }
        }
        if let Some(s) = sink.as_mut() {
            s.flush()?;
        }
        Ok(records)
    }
}

/// Result of [`run_training`].
#[derive(Debug)]
pub struct RunOutput {
    pub trainer: Trainer,
    pub records: Vec<MetricsRecord>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains `config.steps` steps from scratch. With `out`, metrics go to
/// `metrics.jsonl`/`metrics.csv` and the final state to `final.ckpt`.
pub fn run_training(config: TrainConfig, out: Option<&Path>) -> Result<RunOutput> {
    let steps = config.steps;
    let trainer = Trainer::new(config)?;
    finish_run(trainer, steps, out)
}

/// Continues a run from a checkpoint to its configured step count.
pub fn resume_training(path: &Path, out: Option<&Path>) -> Result<RunOutput> {
    let trainer = Trainer::from_checkpoint(load_checkpoint(path)?)?;
    let steps = trainer.config.steps;
    finish_run(trainer, steps, out)
}

fn finish_run(mut trainer: Trainer, steps: u64, out: Option<&Path>) -> Result<RunOutput> {
    let records = trainer.run_until(steps, out)?;
    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&trainer.checkpoint(), &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(RunOutput {
        trainer,
        records,
        checkpoint,
    })
}

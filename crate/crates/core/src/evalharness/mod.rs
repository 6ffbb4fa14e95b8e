//! Success-rate evaluation, experiment grids, latency measurement, report
//! export and the command-line front end.
//!
//! An evaluation episode succeeds when the mean per-coordinate L1 distance
//! between its greedily decoded, detokenized actions and the demonstrator's
//! continuous actions is below `epsilon` (default: one bin width, `2/V`).

mod cli;
mod grid;
mod latency;
mod report;

pub use cli::cli_main;
pub use grid::{
    default_cells, run_experiment_grid, Aggregate, CellResult, CellSpec, GridConfig, GridResult, RunResult,
    GRID_RESULT, RUN_REPORT,
};
pub use latency::{bench_latency, LatencyReport};
pub use report::{export_report, ReportFiles};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::banks::{detokenize_actions, Banks, Benchmark, Episode, PoolKind};
use crate::diffcore::{ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::mar::{self, InferenceContext};
use crate::nets::{self, EpisodeTokens};
use crate::seeds;
use crate::trainer::{argmax, checkpoint, Checkpoint, Mode, TrainConfig, Trainer};

pub const DEFAULT_EVAL_SEED: u64 = 20_240_501;

/// One bin width of a `vocab`-bin tokenizer on `[-1, 1]`.
pub fn default_epsilon(vocab: usize) -> f64 {
    2.0 / vocab as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean over episodes of the per-episode mean L1.
    pub mean_l1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SHA-256 of the evaluated parameters.
    pub checkpoint: String,
    pub mode: Mode,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub epsilon: f64,
    pub suites: Vec<SuiteResult>,
    /// Unweighted mean of the suite success rates.
    pub average_sr: f64,
}

impl EvalReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.suite == name)
    }
}

/// Mean absolute error between decoded `tokens` and continuous `actions`.
pub fn episode_l1(tokens: &[usize], ep: &Episode, vocab: usize) -> Result<f64> {
    let decoded = detokenize_actions(tokens, vocab, ep.dof, ep.horizon)?;
    let sum: f64 = decoded.iter().zip(&ep.actions).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / ep.actions.len() as f64)
}

/// A frozen model ready for greedy decoding.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub config: TrainConfig,
    pub bench: Benchmark,
    pub banks: Banks,
    pub store: ParameterStore,
    /// Memory built from a context set drawn with the eval seed (meta modes).
    pub memory: Option<InferenceContext>,
    pub identity: String,
    pub eval_seed: u64,
}

/// Episodes decoded together; bounds the size of one record.
const DECODE_CHUNK: usize = 50;

impl Evaluator {
    pub fn new(
        config: TrainConfig,
        bench: Benchmark,
        mut banks: Banks,
        store: ParameterStore,
        identity: String,
        eval_seed: u64,
    ) -> Result<Self> {
        let memory = build_memory(&config, &bench, &mut banks, &store, eval_seed)?;
        Ok(Evaluator {
            config,
            bench,
            banks,
            store,
            memory,
            identity,
            eval_seed,
        })
    }

    pub fn from_trainer(t: &Trainer, eval_seed: u64) -> Result<Self> {
        let bytes = t.checkpoint().encode()?;
        let identity = checkpoint::checkpoint_identity(&bytes)?;
        Self::new(
            t.config.clone(),
            t.bench.clone(),
            t.banks.clone(),
            t.state.store.clone(),
            identity,
            eval_seed,
        )
    }

    pub fn from_checkpoint(ck: Checkpoint, eval_seed: u64) -> Result<Self> {
        let identity = checkpoint::checkpoint_identity(&ck.encode()?)?;
        let t = Trainer::from_checkpoint(ck)?;
        Self::new(t.config, t.bench, t.banks, t.state.store, identity, eval_seed)
    }

    /// Logits for the last position of every prefix.
    fn next_logits(&self, prefixes: &[EpisodeTokens]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let dec = nets::backbone_hidden(&mut tape, &self.store, &self.config.net, prefixes)?;
        let last: Vec<usize> = dec.segments.iter().map(|s| s.start + s.len - 1).collect();
        let h = tape.gather_rows(dec.hidden, last)?;
        let h = tape.value(h);
        let t = match &self.memory {
            Some(m) => m.logits_frozen(&self.store, &self.config.mar_config(), h)?,
            None => nets::output_head_frozen(&self.store, h)?,
        };
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    /// Greedy autoregressive action tokens for each episode (observations
    /// and instructions are given; actions come from the model).
    pub fn greedy_decode(&self, episodes: &[&Episode]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(episodes.len());
        for chunk in episodes.chunks(DECODE_CHUNK) {
            let mut prefixes: Vec<EpisodeTokens> = chunk
                .iter()
                .map(|e| EpisodeTokens {
                    actions: Vec::new(),
                    ..self.bench.tokens(e)
                })
                .collect();
            let max_len = chunk.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
            for j in 0..max_len {
                let open: Vec<usize> =
                    (0..chunk.len()).filter(|&i| j < chunk[i].tokens.len()).collect();
                let batch: Vec<EpisodeTokens> = open.iter().map(|&i| prefixes[i].clone()).collect();
                let logits = self.next_logits(&batch)?;
                for (&i, row) in open.iter().zip(&logits) {
                    prefixes[i].actions.push(argmax(row));
                }
            }
            out.extend(prefixes.into_iter().map(|p| p.actions));
        }
        Ok(out)
    }

    /// The first `n_episodes` of a suite's evaluation pool.
    pub fn eval_episodes(&self, suite: &str, n_episodes: usize) -> Result<Vec<&Episode>> {
        let idx = self
            .banks
            .target
            .suite_index(suite)
            .ok_or_else(|| Error::Config(format!("unknown suite {suite:?}")))?;
        let pool = &self.banks.target.suites[idx].eval.episodes;
        if n_episodes == 0 || n_episodes > pool.len() {
            return Err(Error::Config(format!(
                "{n_episodes} evaluation episodes requested, suite {suite} has {}",
                pool.len()
            )));
        }
        let eps: Vec<&Episode> = pool[..n_episodes].iter().collect();
        for e in &eps {
            if PoolKind::of_seed(e.seed) != Some(PoolKind::Eval) {
                return Err(Error::Protocol(format!(
                    "episode {:?} is not from an evaluation pool",
                    e.id()
                )));
            }
        }
        Ok(eps)
    }

    /// Per-episode mean L1 of greedy decodes.
    pub fn suite_errors(&self, suite: &str, n_episodes: usize) -> Result<Vec<f64>> {
        let eps = self.eval_episodes(suite, n_episodes)?;
        let decoded = self.greedy_decode(&eps)?;
        eps.iter()
            .zip(&decoded)
            .map(|(e, toks)| episode_l1(toks, e, self.config.net.vocab_size))
            .collect()
    }

    pub fn eval_suite(&self, suite: &str, n_episodes: usize, epsilon: f64) -> Result<SuiteResult> {
        let errs = self.suite_errors(suite, n_episodes)?;
        Ok(suite_result(suite, &errs, epsilon))
    }

    /// Suites a run is scored on: its own suite for `per_task_sft`, every
    /// in-domain suite otherwise.
    pub fn default_suites(&self) -> Vec<String> {
        match (&self.config.mode, &self.config.suite) {
            (Mode::PerTaskSft, Some(s)) => vec![s.clone()],
            _ => self.banks.target.suite_names(),
        }
    }

    pub fn evaluate(&self, suites: &[String], n_episodes: usize, epsilon: f64) -> Result<EvalReport> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        let results = suites
            .iter()
            .map(|s| self.eval_suite(s, n_episodes, epsilon))
            .collect::<Result<Vec<_>>>()?;
        let average_sr = if results.is_empty() {
            0.0
        } else {
            results.iter().map(|r| r.success_rate).sum::<f64>() / results.len() as f64
        };
        Ok(EvalReport {
            checkpoint: self.identity.clone(),
            mode: self.config.mode,
            train_seed: self.config.seed,
            eval_seed: self.eval_seed,
            epsilon,
            suites: results,
            average_sr,
        })
    }
}

/// Resamples the context set with the eval seed and freezes the memory
/// (meta modes only).
fn build_memory(
    config: &TrainConfig,
    bench: &Benchmark,
    banks: &mut Banks,
    store: &ParameterStore,
    eval_seed: u64,
) -> Result<Option<InferenceContext>> {
    if !config.mode.is_meta() {
        return Ok(None);
    }
    let mut rng = seeds::rng(&[eval_seed, seeds::label("eval-context")]);
    banks.context.resample(&mut rng);
    let tokens: Vec<EpisodeTokens> = banks.context.active().map(|e| bench.tokens(e)).collect();
    let pairs = mar::encode_pairs(store, &config.net, &tokens, &banks.context.active_tasks())?;
    let memory = InferenceContext::build(store, &config.mar_config(), &pairs, config.net.ln_eps)?;
    Ok(Some(memory))
}

pub fn suite_result(suite: &str, errors: &[f64], epsilon: f64) -> SuiteResult {
    let successes = errors.iter().filter(|&&e| e < epsilon).count();
    let n = errors.len();
    SuiteResult {
        suite: suite.to_string(),
        episodes: n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        mean_l1: if n == 0 { 0.0 } else { errors.iter().sum::<f64>() / n as f64 },
    }
}

/// Success rate of a checkpoint on one suite with the default eval seed.
pub fn eval_success_rate(ck: &Checkpoint, suite: &str, n_episodes: usize, epsilon: f64) -> Result<f64> {
    let ev = Evaluator::from_checkpoint(ck.clone(), DEFAULT_EVAL_SEED)?;
    Ok(ev.eval_suite(suite, n_episodes, epsilon)?.success_rate)
}

/// Uniformly random tokens for every episode; a reference model.
pub fn random_tokens<R: Rng + ?Sized>(episodes: &[&Episode], vocab: usize, rng: &mut R) -> Vec<Vec<usize>> {
    episodes
        .iter()
        .map(|e| (0..e.tokens.len()).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

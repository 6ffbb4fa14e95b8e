use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::task::{Benchmark, Domain, Episode, EpisodeId};
use crate::error::{Error, Result};

/// Episode seeds of each pool live in their own range, so pools of one task
/// can never share a demonstration.
pub const SEED_STRIDE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Train,
    Context,
    Eval,
}

impl PoolKind {
    pub fn seed_range(self, n: usize) -> Range<u64> {
        let start = match self {
            PoolKind::Train => 0,
            PoolKind::Context => SEED_STRIDE,
            PoolKind::Eval => 2 * SEED_STRIDE,
        };
        start..start + n as u64
    }

    /// Pool an episode seed was drawn for.
    pub fn of_seed(seed: u64) -> Option<PoolKind> {
        match seed / SEED_STRIDE {
            0 => Some(PoolKind::Train),
            1 => Some(PoolKind::Context),
            2 => Some(PoolKind::Eval),
            _ => None,
        }
    }
}

/// Where the context bank's episodes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Held-out context pools of the in-domain suites.
    InDomain,
    /// In-domain context pools plus every auxiliary task.
    InDomainAux,
    /// The in-domain training pools themselves (demonstrations the model
    /// already trains on).
    Stale,
}

impl ContextSource {
    pub fn includes_auxiliary(self) -> bool {
        self == ContextSource::InDomainAux
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextProtocol {
    /// Episodes sampled per context task at each refresh.
    pub bc: usize,
    /// Refresh period in steps.
    pub k: u64,
    pub source: ContextSource,
}

impl Default for ContextProtocol {
    fn default() -> Self {
        ContextProtocol {
            bc: 32,
            k: 200,
            source: ContextSource::InDomainAux,
        }
    }
}

/// Episodes of one suite or auxiliary task drawn for one purpose.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub name: String,
    pub domain: Domain,
    pub kind: PoolKind,
    pub episodes: Vec<Episode>,
}

impl TaskPool {
    fn build(bench: &Benchmark, name: &str, tasks: &[usize], kind: PoolKind, n: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config(format!("no tasks for pool {name}")));
        }
        if n as u64 >= SEED_STRIDE {
            return Err(Error::Protocol(format!("pool {name} overflows its seed range")));
        }
        let seeds = kind.seed_range(n);
        let episodes = seeds
            .enumerate()
            .map(|(k, seed)| bench.episode(tasks[k % tasks.len()], seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskPool {
            name: name.to_string(),
            domain: bench.task(tasks[0]).domain,
            kind,
            episodes,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = EpisodeId> + '_ {
        self.episodes.iter().map(Episode::id)
    }
}

/// In-domain training and evaluation pools.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBank {
    pub suites: Vec<SuitePools>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuitePools {
    pub name: String,
    pub train: TaskPool,
    pub eval: TaskPool,
}

impl TargetBank {
    pub fn suite_index(&self, name: &str) -> Option<usize> {
        self.suites.iter().position(|s| s.name == name)
    }

    pub fn suite_names(&self) -> Vec<String> {
        self.suites.iter().map(|s| s.name.clone()).collect()
    }
}

/// The external memory: one pool per context task and the active set.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBank {
    pub pools: Vec<TaskPool>,
    pub protocol: ContextProtocol,
    /// `(pool, episode index)` of every active context episode.
    active: Vec<(usize, usize)>,
    refreshes: u64,
}

impl ContextBank {
    pub fn new(pools: Vec<TaskPool>, protocol: ContextProtocol) -> Result<Self> {
        if pools.is_empty() {
            return Err(Error::EmptyContext);
        }
        if protocol.bc == 0 || protocol.k == 0 {
            return Err(Error::Config("b_C and K must be positive".into()));
        }
        for p in &pools {
            if protocol.bc > p.episodes.len() {
                return Err(Error::Config(format!(
                    "b_C {} exceeds the {} episodes of context task {}",
                    protocol.bc,
                    p.episodes.len(),
                    p.name
                )));
            }
        }
        Ok(ContextBank {
            pools,
            protocol,
            active: Vec::new(),
            refreshes: 0,
        })
    }

    /// Resamples the active set when `step` is a multiple of `K`; otherwise a
    /// no-op. Returns whether a refresh happened.
    pub fn refresh_context<R: Rng + ?Sized>(&mut self, step: u64, rng: &mut R) -> bool {
        if step % self.protocol.k != 0 {
            return false;
        }
        self.resample(rng);
        true
    }

    /// Unconditional resample of `b_C` episodes per task, without
    /// replacement within each task's pool.
    pub fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.active.clear();
        for (pi, pool) in self.pools.iter().enumerate() {
            let picks = index::sample(rng, pool.episodes.len(), self.protocol.bc);
            self.active.extend(picks.into_iter().map(|i| (pi, i)));
        }
        self.refreshes += 1;
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    pub fn is_populated(&self) -> bool {
        !self.active.is_empty()
    }

    pub fn active(&self) -> impl Iterator<Item = &Episode> {
        self.active.iter().map(|&(p, i)| &self.pools[p].episodes[i])
    }

    pub fn active_ids(&self) -> Vec<EpisodeId> {
        self.active().map(Episode::id).collect()
    }

    /// Context-task index of each active episode.
    pub fn active_tasks(&self) -> Vec<usize> {
        self.active.iter().map(|&(p, _)| p).collect()
    }

    pub fn n_tasks(&self) -> usize {
        self.pools.len()
    }

    /// Raw active-set cursor, for checkpointing.
    pub fn state(&self) -> (Vec<(usize, usize)>, u64) {
        (self.active.clone(), self.refreshes)
    }

    pub fn restore(&mut self, active: Vec<(usize, usize)>, refreshes: u64) -> Result<()> {
        for &(p, i) in &active {
            if p >= self.pools.len() || i >= self.pools[p].episodes.len() {
                return Err(Error::Protocol(format!("active context entry ({p}, {i}) out of range")));
            }
        }
        self.active = active;
        self.refreshes = refreshes;
        Ok(())
    }
}

/// Every pool of a benchmark split for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Banks {
    pub context: ContextBank,
    pub target: TargetBank,
    /// Auxiliary-task pools; targets only in the naive mixing regime.
    pub auxiliary: Vec<TaskPool>,
}

/// Splits the benchmark into disjoint pools: in-domain suites get train,
/// context and eval pools from separate seed ranges; auxiliary tasks get
/// context pools only.
pub fn split_banks(bench: &Benchmark, protocol: &ContextProtocol) -> Result<Banks> {
    let sizes = &bench.config.pools;
    let mut suites = Vec::new();
    let mut in_domain_context = Vec::new();
    for name in bench.in_domain_suites() {
        let tasks = bench.suite_tasks(&name);
        let train = TaskPool::build(bench, &name, &tasks, PoolKind::Train, sizes.train)?;
        let eval = TaskPool::build(bench, &name, &tasks, PoolKind::Eval, sizes.eval)?;
        in_domain_context.push(TaskPool::build(bench, &name, &tasks, PoolKind::Context, sizes.context)?);
        suites.push(SuitePools { name, train, eval });
    }
    let auxiliary = bench
        .auxiliary_tasks()
        .into_iter()
        .map(|t| TaskPool::build(bench, &bench.task(t).suite, &[t], PoolKind::Context, sizes.context))
        .collect::<Result<Vec<_>>>()?;

    let context_pools = match protocol.source {
        ContextSource::InDomain => in_domain_context,
        ContextSource::InDomainAux => in_domain_context.into_iter().chain(auxiliary.iter().cloned()).collect(),
        ContextSource::Stale => suites.iter().map(|s| s.train.clone()).collect(),
    };
    let banks = Banks {
        context: ContextBank::new(context_pools, protocol.clone())?,
        target: TargetBank { suites },
        auxiliary,
    };
    banks.audit_disjoint()?;
    Ok(banks)
}

impl Banks {
    /// Checks that training, held-out context and evaluation pools share no
    /// episode, and that no auxiliary episode sits in the target bank.
    pub fn audit_disjoint(&self) -> Result<()> {
        let mut train = BTreeSet::new();
        let mut eval = BTreeSet::new();
        for s in &self.target.suites {
            for pool in [&s.train, &s.eval] {
                if pool.domain == Domain::Auxiliary {
                    return Err(Error::Protocol(format!("auxiliary pool {} in target bank", pool.name)));
                }
            }
            train.extend(s.train.ids());
            eval.extend(s.eval.ids());
        }
        if !train.is_disjoint(&eval) {
            return Err(Error::Protocol("training and evaluation pools overlap".into()));
        }
        for pool in &self.context.pools {
            let ids: BTreeSet<_> = pool.ids().collect();
            if !ids.is_disjoint(&eval) {
                return Err(Error::Protocol(format!("context pool {} overlaps evaluation", pool.name)));
            }
            if pool.kind != PoolKind::Train && !ids.is_disjoint(&train) {
                return Err(Error::Protocol(format!("context pool {} overlaps training", pool.name)));
            }
        }
        Ok(())
    }
}

/// What target batches draw from.
#[derive(Clone, Copy, Debug)]
pub enum TargetMix<'a> {
    /// Uniform over in-domain suites.
    AllSuites,
    /// One suite only.
    Suite(usize),
    /// Uniform over in-domain suites and auxiliary tasks, each auxiliary
    /// task weighted `aux_weight` relative to a suite.
    WithAuxiliary { pools: &'a [TaskPool], aux_weight: f64 },
}

impl TargetMix<'_> {
    /// Probability that one sampled episode is auxiliary.
    pub fn auxiliary_probability(&self, n_suites: usize) -> f64 {
        match self {
            TargetMix::WithAuxiliary { pools, aux_weight } => {
                let a = pools.len() as f64 * aux_weight;
                a / (n_suites as f64 + a)
            }
            _ => 0.0,
        }
    }
}

/// Draws a suite (or auxiliary task) uniformly, then an episode uniformly
/// within it, `batch` times.
pub fn sample_target_batch<'b, R: Rng + ?Sized>(
    bank: &'b TargetBank,
    batch: usize,
    rng: &mut R,
    mix: TargetMix<'b>,
) -> Result<Vec<&'b Episode>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let n = bank.suites.len();
    if n == 0 {
        return Err(Error::Config("empty target bank".into()));
    }
    let mut out = Vec::with_capacity(batch);
    match mix {
        TargetMix::AllSuites => {
            for _ in 0..batch {
                let pool = &bank.suites[rng.random_range(0..n)].train.episodes;
                out.push(&pool[rng.random_range(0..pool.len())]);
            }
        }
        TargetMix::Suite(s) => {
            let pool = &bank
                .suites
                .get(s)
                .ok_or_else(|| Error::Config(format!("unknown suite index {s}")))?
                .train
                .episodes;
            for _ in 0..batch {
                out.push(&pool[rng.random_range(0..pool.len())]);
            }
        }
        TargetMix::WithAuxiliary { pools, .. } => {
            let p_aux = mix.auxiliary_probability(n);
            for _ in 0..batch {
                let pool = if !pools.is_empty() && rng.random::<f64>() < p_aux {
                    &pools[rng.random_range(0..pools.len())].episodes
                } else {
                    &bank.suites[rng.random_range(0..n)].train.episodes
                };
                out.push(&pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    Ok(out)
}

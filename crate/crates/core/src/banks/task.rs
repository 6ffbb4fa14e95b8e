use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tokenize::tokenize_actions;
use crate::error::{Error, Result};
use crate::nets::EpisodeTokens;
use crate::seeds;

/// The four in-domain suites, in task-id order.
pub const SUITES: [&str; 4] = ["goal", "spatial", "object", "long"];
pub const LONG_SUITE: &str = "long";
pub const BIMANUAL: &str = "bimanual";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    Auxiliary,
}

/// Episodes per pool, per in-domain suite (train/context/eval) and per
/// auxiliary task (context only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolSizes {
    pub train: usize,
    pub context: usize,
    pub eval: usize,
}

impl Default for PoolSizes {
    fn default() -> Self {
        PoolSizes {
            train: 200,
            context: 100,
            eval: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub obs_dim: usize,
    pub dof: usize,
    pub base_horizon: usize,
    pub long_horizon: usize,
    pub variants_per_suite: usize,
    /// Random Fourier features in each ground-truth policy.
    pub n_features: usize,
    pub feature_scale: f64,
    pub output_scale: f64,
    pub shift_scale: f64,
    pub goal_scale: f64,
    pub side_view_tasks: usize,
    pub bimanual_tasks: usize,
    pub bimanual_obs_dim: usize,
    pub bimanual_dof: usize,
    pub vocab_size: usize,
    /// Output width of the frozen observation adapters (the decoder width).
    pub adapter_dim: usize,
    pub pools: PoolSizes,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 7,
            obs_dim: 3,
            dof: 7,
            base_horizon: 2,
            long_horizon: 5,
            variants_per_suite: 10,
            n_features: 8,
            feature_scale: 0.5,
            output_scale: 1.0,
            shift_scale: 0.7,
            goal_scale: 0.5,
            side_view_tasks: 5,
            bimanual_tasks: 1,
            bimanual_obs_dim: 12,
            bimanual_dof: 14,
            vocab_size: 32,
            adapter_dim: 64,
            pools: PoolSizes::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_dim", self.obs_dim),
            ("dof", self.dof),
            ("base_horizon", self.base_horizon),
            ("long_horizon", self.long_horizon),
            ("variants_per_suite", self.variants_per_suite),
            ("n_features", self.n_features),
            ("bimanual_obs_dim", self.bimanual_obs_dim),
            ("bimanual_dof", self.bimanual_dof),
            ("adapter_dim", self.adapter_dim),
            ("pools.train", self.pools.train),
            ("pools.context", self.pools.context),
            ("pools.eval", self.pools.eval),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.obs_dim < 2 {
            return Err(Error::Config("obs_dim must be at least 2".into()));
        }
        let scales = [self.feature_scale, self.output_scale, self.shift_scale, self.goal_scale];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn n_in_domain(&self) -> usize {
        SUITES.len() * self.variants_per_suite
    }

    pub fn n_tasks(&self) -> usize {
        self.n_in_domain() + self.side_view_tasks + self.bimanual_tasks
    }
}

/// One synthetic task. Everything random about it is named by a seed so the
/// definition round-trips through a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: usize,
    pub suite: String,
    pub domain: Domain,
    pub instruction: usize,
    pub obs_dim: usize,
    pub dof: usize,
    pub horizon: usize,
    pub function_seed: u64,
    pub adapter_seed: u64,
    /// Camera rotation applied to observations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_seed: Option<u64>,
    /// Per-variant action offset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_seed: Option<u64>,
    /// Per-variant shift of the observation distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift_seed: Option<u64>,
    /// Observation coordinates the policy reads (all when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn is_auxiliary(&self) -> bool {
        self.domain == Domain::Auxiliary
    }

    pub fn n_tokens(&self) -> usize {
        self.horizon * self.dof
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.dof == 0 || self.obs_dim == 0 {
            return Err(Error::Config(format!("task {}: horizon, dof and obs_dim must be >= 1", self.id)));
        }
        if let Some(sub) = &self.subspace {
            if sub.is_empty() || sub.iter().any(|&i| i >= self.obs_dim) {
                return Err(Error::Config(format!("task {}: bad subspace {sub:?}", self.id)));
            }
        }
        Ok(())
    }
}

/// Default task list: per suite `variants_per_suite` in-domain tasks, then
/// side-view single-arm tasks, then bimanual tasks.
pub fn make_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    let s = cfg.seed;
    let in_adapter = seeds::derive(&[s, seeds::label("adapter/in-domain")]);
    let mut tasks = Vec::with_capacity(cfg.n_tasks());
    for (si, suite) in SUITES.iter().enumerate() {
        let function_seed = seeds::derive(&[s, seeds::label("function"), si as u64]);
        for v in 0..cfg.variants_per_suite {
            let id = tasks.len();
            let vs = |what: &str| Some(seeds::derive(&[s, seeds::label(what), si as u64, v as u64]));
            let mut t = TaskSpec {
                id,
                suite: suite.to_string(),
                domain: Domain::InDomain,
                instruction: id,
                obs_dim: cfg.obs_dim,
                dof: cfg.dof,
                horizon: cfg.base_horizon,
                function_seed,
                adapter_seed: in_adapter,
                view_seed: None,
                goal_seed: None,
                shift_seed: None,
                subspace: None,
            };
            match *suite {
                "goal" => t.goal_seed = vs("goal"),
                "spatial" => t.shift_seed = vs("shift"),
                "object" => {
                    let mut rng = seeds::rng(&[s, seeds::label("subspace"), v as u64]);
                    let mut dims: Vec<usize> = (0..cfg.obs_dim).collect();
                    for i in (1..dims.len()).rev() {
                        dims.swap(i, rng.random_range(0..=i));
                    }
                    let mut keep = dims[..cfg.obs_dim.div_ceil(2)].to_vec();
                    keep.sort_unstable();
                    t.subspace = Some(keep);
                }
                _ => {
                    t.horizon = cfg.long_horizon;
                    t.goal_seed = vs("goal");
                    t.shift_seed = vs("shift");
                }
            }
            tasks.push(t);
        }
    }
    for k in 0..cfg.side_view_tasks {
        let id = tasks.len();
        tasks.push(TaskSpec {
            id,
            suite: format!("side_view_{k}"),
            domain: Domain::Auxiliary,
            instruction: id,
            obs_dim: cfg.obs_dim,
            dof: cfg.dof,
            horizon: cfg.base_horizon,
            // A related skill from one of the in-domain families, seen from a
            // different camera.
            function_seed: seeds::derive(&[s, seeds::label("function"), (k % SUITES.len()) as u64]),
            adapter_seed: seeds::derive(&[s, seeds::label("adapter/aux"), id as u64]),
            view_seed: Some(seeds::derive(&[s, seeds::label("view"), k as u64])),
            goal_seed: Some(seeds::derive(&[s, seeds::label("aux-goal"), k as u64])),
            shift_seed: None,
            subspace: None,
        });
    }
    for k in 0..cfg.bimanual_tasks {
        let id = tasks.len();
        let name = if cfg.bimanual_tasks == 1 {
            BIMANUAL.to_string()
        } else {
            format!("{BIMANUAL}_{k}")
        };
        tasks.push(TaskSpec {
            id,
            suite: name,
            domain: Domain::Auxiliary,
            instruction: id,
            obs_dim: cfg.bimanual_obs_dim,
            dof: cfg.bimanual_dof,
            horizon: cfg.base_horizon,
            function_seed: seeds::derive(&[s, seeds::label("bimanual-function"), k as u64]),
            adapter_seed: seeds::derive(&[s, seeds::label("adapter/aux"), id as u64]),
            view_seed: None,
            goal_seed: None,
            shift_seed: None,
            subspace: None,
        });
    }
    Ok(tasks)
}

fn normals<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Random orthonormal `n×n` matrix (Gram-Schmidt on a Gaussian draw).
fn rotation(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeds::rng(&[seed, seeds::label("rotation")]);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v = normals(&mut rng, n, 1.0);
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    q.concat()
}

/// Ground-truth policy of a task: a bounded random-feature map
/// `a[t, j] = tanh(Σ_k C[j,k] · cos(W_k · (m ⊙ x) + b_k + τ_k · t) + g_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    obs_dim: usize,
    dof: usize,
    horizon: usize,
    n_features: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    tau: Vec<f64>,
    c: Vec<f64>,
    goal: Vec<f64>,
    mask: Vec<f64>,
    shift: Vec<f64>,
    rotation: Option<Vec<f64>>,
}

impl Policy {
    pub fn new(task: &TaskSpec, cfg: &BenchmarkConfig) -> Result<Self> {
        task.validate()?;
        let (d, f, dof) = (task.obs_dim, cfg.n_features, task.dof);
        let mut rng = seeds::rng(&[task.function_seed, d as u64, dof as u64]);
        let w = normals(&mut rng, f * d, cfg.feature_scale / (d as f64).sqrt());
        let b: Vec<f64> = (0..f).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let tau: Vec<f64> = (0..f).map(|_| rng.random_range(-1.5..1.5)).collect();
        let c = normals(&mut rng, dof * f, cfg.output_scale * (2.0 / f as f64).sqrt());
        let goal = match task.goal_seed {
            Some(s) => normals(&mut seeds::rng(&[s]), dof, cfg.goal_scale),
            None => vec![0.0; dof],
        };
        let shift = match task.shift_seed {
            Some(s) => normals(&mut seeds::rng(&[s]), d, cfg.shift_scale),
            None => vec![0.0; d],
        };
        let mask = match &task.subspace {
            Some(sub) => (0..d).map(|i| if sub.contains(&i) { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; d],
        };
        Ok(Policy {
            obs_dim: d,
            dof,
            horizon: task.horizon,
            n_features: f,
            w,
            b,
            tau,
            c,
            goal,
            mask,
            shift,
            rotation: task.view_seed.map(|s| rotation(s, d)),
        })
    }

    /// Draws a world-frame observation from the task's distribution.
    pub fn sample_state<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        normals(rng, self.obs_dim, 1.0)
            .into_iter()
            .zip(&self.shift)
            .map(|(z, s)| z + s)
            .collect()
    }

    /// What the task's camera reports for a world-frame state.
    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        match &self.rotation {
            None => state.to_vec(),
            Some(r) => (0..self.obs_dim)
                .map(|i| (0..self.obs_dim).map(|j| r[i * self.obs_dim + j] * state[j]).sum())
                .collect(),
        }
    }

    /// `T×dof` actions, row-major, for a world-frame state.
    pub fn actions(&self, state: &[f64]) -> Vec<f64> {
        let (d, f) = (self.obs_dim, self.n_features);
        let x: Vec<f64> = state.iter().zip(&self.mask).map(|(a, m)| a * m).collect();
        let proj: Vec<f64> = (0..f)
            .map(|k| self.b[k] + (0..d).map(|i| self.w[k * d + i] * x[i]).sum::<f64>())
            .collect();
        let mut out = Vec::with_capacity(self.horizon * self.dof);
        for t in 1..=self.horizon {
            let feats: Vec<f64> = (0..f).map(|k| (proj[k] + self.tau[k] * t as f64).cos()).collect();
            for j in 0..self.dof {
                let pre = self.goal[j] + (0..f).map(|k| self.c[j * f + k] * feats[k]).sum::<f64>();
                out.push(pre.tanh());
            }
        }
        out
    }
}

/// One demonstration.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: usize,
    pub seed: u64,
    pub instruction: usize,
    /// Observation as reported by the task's camera.
    pub observation: Vec<f64>,
    /// `T×dof` continuous actions in `[-1, 1]`, row-major.
    pub actions: Vec<f64>,
    pub tokens: Vec<usize>,
    pub dof: usize,
    pub horizon: usize,
}

impl Episode {
    pub fn id(&self) -> EpisodeId {
        EpisodeId {
            task: self.task,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpisodeId {
    pub task: usize,
    pub seed: u64,
}

/// Deterministic in `(task, seed)`.
pub fn gen_episode(task: &TaskSpec, policy: &Policy, seed: u64, vocab: usize) -> Result<Episode> {
    let mut rng = seeds::rng(&[task.function_seed, task.id as u64, seed, seeds::label("episode")]);
    let state = policy.sample_state(&mut rng);
    let actions = policy.actions(&state);
    let tokens = tokenize_actions(&actions, vocab)?;
    Ok(Episode {
        task: task.id,
        seed,
        instruction: task.instruction,
        observation: policy.observe(&state),
        actions,
        tokens,
        dof: task.dof,
        horizon: task.horizon,
    })
}

/// Frozen random projection from a task's observation space to the decoder
/// width; shared by tasks that share a camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    obs_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
}

impl Adapter {
    pub fn new(seed: u64, obs_dim: usize, out_dim: usize) -> Self {
        let mut rng = seeds::rng(&[seed, obs_dim as u64, out_dim as u64]);
        Adapter {
            obs_dim,
            out_dim,
            w: normals(&mut rng, obs_dim * out_dim, 1.0 / (obs_dim as f64).sqrt()),
        }
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        for (i, &x) in obs.iter().enumerate().take(self.obs_dim) {
            for (o, w) in out.iter_mut().zip(&self.w[i * self.out_dim..(i + 1) * self.out_dim]) {
                *o += x * w;
            }
        }
        out
    }
}

/// A task list with its policies and adapters materialized.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub tasks: Vec<TaskSpec>,
    policies: Vec<Policy>,
    adapters: Vec<Adapter>,
}

impl Benchmark {
    pub fn new(config: BenchmarkConfig) -> Result<Self> {
        let tasks = make_benchmark(&config)?;
        Self::from_tasks(config, tasks)
    }

    pub fn from_tasks(config: BenchmarkConfig, tasks: Vec<TaskSpec>) -> Result<Self> {
        config.validate()?;
        for (i, t) in tasks.iter().enumerate() {
            if t.id != i {
                return Err(Error::Config(format!("task at position {i} has id {}", t.id)));
            }
        }
        let policies = tasks.iter().map(|t| Policy::new(t, &config)).collect::<Result<_>>()?;
        let adapters = tasks
            .iter()
            .map(|t| Adapter::new(t.adapter_seed, t.obs_dim, config.adapter_dim))
            .collect();
        Ok(Benchmark {
            config,
            tasks,
            policies,
            adapters,
        })
    }

    pub fn task(&self, id: usize) -> &TaskSpec {
        &self.tasks[id]
    }

    pub fn policy(&self, id: usize) -> &Policy {
        &self.policies[id]
    }

    pub fn episode(&self, task: usize, seed: u64) -> Result<Episode> {
        let spec = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Config(format!("unknown task {task}")))?;
        gen_episode(spec, &self.policies[task], seed, self.config.vocab_size)
    }

    /// Decoder input for an episode: the observation passes through the
    /// task's adapter.
    pub fn tokens(&self, ep: &Episode) -> EpisodeTokens {
        EpisodeTokens {
            instruction: ep.instruction,
            observation: self.adapters[ep.task].apply(&ep.observation),
            actions: ep.tokens.clone(),
        }
    }

    pub fn in_domain_suites(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.tasks.iter().filter(|t| !t.is_auxiliary()) {
            if !out.contains(&t.suite) {
                out.push(t.suite.clone());
            }
        }
        out
    }

    pub fn suite_tasks(&self, suite: &str) -> Vec<usize> {
        self.tasks.iter().filter(|t| t.suite == suite).map(|t| t.id).collect()
    }

    pub fn auxiliary_tasks(&self) -> Vec<usize> {
        self.tasks.iter().filter(|t| t.is_auxiliary()).map(|t| t.id).collect()
    }

    /// Longest decoder sequence any task needs.
    pub fn max_positions(&self) -> usize {
        self.tasks.iter().map(|t| t.n_tokens() + 2).max().unwrap_or(2)
    }
}

//! Experiment grids: cells × seeds of train-then-evaluate runs.
//!
//! Every run lives in `<out>/<cell>/seed-<s>/` and ends with a
//! `report.json`; with `resume`, runs whose report matches the requested
//! configuration are loaded instead of retrained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{default_epsilon, EvalReport, Evaluator, DEFAULT_EVAL_SEED};
use crate::banks::{ContextSource, SUITES};
use crate::error::{Error, Result};
use crate::trainer::{run_training, MetricsRecord, Mode, TrainConfig};

pub const GRID_RESULT: &str = "grid.json";
pub const RUN_REPORT: &str = "report.json";

/// A grid row: a mode plus overrides of the base training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bc: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ContextSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
}

impl CellSpec {
    pub fn new(name: &str, mode: Mode) -> Self {
        CellSpec {
            name: name.to_string(),
            mode,
            suite: None,
            bc: None,
            k: None,
            source: None,
            beta: None,
            aux_weight: None,
            steps: None,
        }
    }

    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = base.clone();
        c.mode = self.mode;
        c.seed = seed;
        c.suite = self.suite.clone();
        if let Some(bc) = self.bc {
            c.context.bc = bc;
        }
        if let Some(k) = self.k {
            c.context.k = k;
        }
        if let Some(s) = self.source {
            c.context.source = s;
        }
        if let Some(b) = self.beta {
            c.beta = b;
        }
        if let Some(w) = self.aux_weight {
            c.aux_weight = w;
        }
        if let Some(s) = self.steps {
            c.steps = s;
        }
        c
    }
}

fn meta_cell(name: &str, bc: usize, source: ContextSource) -> CellSpec {
    CellSpec {
        bc: Some(bc),
        source: Some(source),
        ..CellSpec::new(name, Mode::MetaDet)
    }
}

/// The standard rows: per-suite SFT, 4-suite SFT, SFT with auxiliary
/// targets, the memory with and without auxiliary context, the latent
/// variant, the context-batch sweep and the stale-context control.
pub fn default_cells() -> Vec<CellSpec> {
    let mut cells: Vec<CellSpec> = SUITES
        .iter()
        .map(|s| CellSpec {
            suite: Some(s.to_string()),
            ..CellSpec::new(&format!("sft_{s}"), Mode::PerTaskSft)
        })
        .collect();
    cells.push(CellSpec::new("sft_4suite", Mode::MultitaskSft));
    cells.push(CellSpec::new("sft_aux", Mode::MultitaskSftAux));
    cells.push(meta_cell("meta_noaux", 32, ContextSource::InDomain));
    cells.push(meta_cell("meta_aux", 32, ContextSource::InDomainAux));
    cells.push(CellSpec {
        bc: Some(32),
        source: Some(ContextSource::InDomainAux),
        ..CellSpec::new("meta_stoch", Mode::MetaStoch)
    });
    for bc in [4, 8, 16] {
        cells.push(meta_cell(&format!("meta_bc{bc}"), bc, ContextSource::InDomainAux));
    }
    cells.push(meta_cell("meta_stale", 32, ContextSource::Stale));
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Evaluation episodes per suite.
    pub eval_episodes: usize,
    /// Success threshold; one bin width when absent.
    pub epsilon: Option<f64>,
    pub eval_seed: u64,
    /// Concurrent runs; zero means one per available core.
    pub jobs: usize,
    pub base: TrainConfig,
    pub cells: Vec<CellSpec>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            name: "desk".to_string(),
            seeds: vec![0, 1, 2],
            eval_episodes: 100,
            epsilon: None,
            eval_seed: DEFAULT_EVAL_SEED,
            jobs: 0,
            base: TrainConfig::default(),
            cells: default_cells(),
        }
    }
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Keeps the named cells, in the given order.
    pub fn select(mut self, names: &[&str]) -> Result<Self> {
        let mut cells = Vec::with_capacity(names.len());
        for n in names {
            let c = self
                .cells
                .iter()
                .find(|c| c.name == *n)
                .ok_or_else(|| Error::Config(format!("no grid cell named {n:?}")))?;
            cells.push(c.clone());
        }
        self.cells = cells;
        Ok(self)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
            .unwrap_or_else(|| default_epsilon(self.base.net.vocab_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            let safe = !c.name.is_empty()
                && c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-');
            if !safe {
                return Err(Error::Config(format!("cell name {:?} is not a plain identifier", c.name)));
            }
            if !seen.insert(&c.name) {
                return Err(Error::Config(format!("duplicate cell {:?}", c.name)));
            }
            c.config(&self.base, self.seeds[0]).validate()?;
        }
        if !(self.epsilon() > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn run_dir(&self, out: &Path, cell: &str, seed: u64) -> PathBuf {
        out.join(cell).join(format!("seed-{seed}"))
    }
}

/// One trained and evaluated seed of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub seed: u64,
    pub config: TrainConfig,
    pub report: EvalReport,
    pub curve: Vec<MetricsRecord>,
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Aggregate { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Aggregate { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub runs: Vec<RunResult>,
    /// Over seeds, of the per-run average success rate.
    pub average_sr: Aggregate,
    pub suite_sr: BTreeMap<String, Aggregate>,
}

impl CellResult {
    pub fn from_runs(spec: CellSpec, runs: Vec<RunResult>) -> Self {
        let avg: Vec<f64> = runs.iter().map(|r| r.report.average_sr).collect();
        let mut per_suite: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for s in &r.report.suites {
                per_suite.entry(s.suite.clone()).or_default().push(s.success_rate);
            }
        }
        CellResult {
            spec,
            average_sr: Aggregate::of(&avg),
            suite_sr: per_suite.into_iter().map(|(k, v)| (k, Aggregate::of(&v))).collect(),
            runs,
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub name: String,
    pub cells: Vec<CellResult>,
    /// Runs trained by this invocation (not persisted).
    #[serde(skip)]
    pub runs_computed: usize,
    /// Training steps taken by this invocation (not persisted).
    #[serde(skip)]
    pub steps_run: u64,
}

impl GridResult {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name() == name)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(GRID_RESULT);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))
}

/// A stored run counts as complete when it was produced by the same
/// training config and evaluation settings.
fn load_completed(grid: &GridConfig, dir: &Path, config: &TrainConfig) -> Option<RunResult> {
    let text = std::fs::read_to_string(dir.join(RUN_REPORT)).ok()?;
    let run: RunResult = serde_json::from_str(&text).ok()?;
    let r = &run.report;
    let same = run.config == *config
        && r.eval_seed == grid.eval_seed
        && r.epsilon.to_bits() == grid.epsilon().to_bits()
        && r.suites.iter().all(|s| s.episodes == grid.eval_episodes);
    same.then_some(run)
}

fn train_and_eval(grid: &GridConfig, dir: &Path, config: TrainConfig) -> Result<RunResult> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let seed = config.seed;
    let out = run_training(config.clone(), Some(dir))?;
    let ev = Evaluator::from_trainer(&out.trainer, grid.eval_seed)?;
    let report = ev.evaluate(&ev.default_suites(), grid.eval_episodes, grid.epsilon())?;
    let run = RunResult {
        seed,
        config,
        report,
        curve: out.records,
    };
    write_atomic(&dir.join(RUN_REPORT), &to_json(&run)?)?;
    Ok(run)
}

/// Trains and evaluates every cell × seed, `grid.jobs` runs at a time,
/// and writes `grid.json` to `out`.
pub fn run_experiment_grid(grid: &GridConfig, out: &Path, resume: bool) -> Result<GridResult> {
    grid.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut slots: Vec<Option<RunResult>> = Vec::new();
    let mut todo = Vec::new();
    for cell in &grid.cells {
        for &seed in &grid.seeds {
            let config = cell.config(&grid.base, seed);
            let dir = grid.run_dir(out, &cell.name, seed);
            let done = if resume { load_completed(grid, &dir, &config) } else { None };
            if done.is_none() {
                todo.push((slots.len(), dir, config));
            }
            slots.push(done);
        }
    }

    let jobs = match grid.jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        j => j,
    }
    .min(todo.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let finished: Mutex<Vec<(usize, Result<RunResult>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((slot, dir, config)) = todo.get(i) else {
                    break;
                };
                let res = train_and_eval(grid, dir, config.clone());
                if res.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                finished.lock().unwrap_or_else(|e| e.into_inner()).push((*slot, res));
            });
        }
    });

    let mut finished = finished.into_inner().unwrap_or_else(|e| e.into_inner());
    finished.sort_by_key(|(slot, _)| *slot);
    let mut runs_computed = 0;
    let mut steps_run = 0;
    for (slot, res) in finished {
        let run = res?;
        runs_computed += 1;
        steps_run += run.config.steps;
        slots[slot] = Some(run);
    }

    let mut slots = slots.into_iter();
    let cells = grid
        .cells
        .iter()
        .map(|spec| {
            let runs = slots.by_ref().take(grid.seeds.len()).flatten().collect();
            CellResult::from_runs(spec.clone(), runs)
        })
        .collect();
    let result = GridResult {
        name: grid.name.clone(),
        cells,
        runs_computed,
        steps_run,
    };
    write_atomic(&out.join(GRID_RESULT), &to_json(&result)?)?;
    Ok(result)
}

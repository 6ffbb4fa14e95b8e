use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::{
    bench_latency, default_epsilon, export_report, run_experiment_grid, Evaluator, GridConfig,
    GridResult, DEFAULT_EVAL_SEED,
};
use crate::banks::{BenchmarkConfig, BenchmarkDoc};
use crate::error::{Error, Result};
use crate::trainer::{load_checkpoint, run_training, Mode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "cotrain", version, about = "Train, evaluate and compare action decoders with and without context memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a benchmark definition (settings plus generated tasks).
    GenBench {
        /// Benchmark settings to start from.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "benchmark.toml")]
        out: PathBuf,
    },
    /// Train one run.
    Train {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Context episodes per task at each refresh.
        #[arg(long)]
        bc: Option<usize>,
        /// Context refresh period in steps.
        #[arg(long)]
        k: Option<u64>,
        /// KL weight.
        #[arg(long)]
        beta: Option<f64>,
        /// Suite for per_task_sft.
        #[arg(long)]
        suite: Option<String>,
        /// Training config (TOML); flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success rate of a checkpoint on held-out episodes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Repeatable; defaults to the suites the run targets.
        #[arg(long)]
        suite: Vec<String>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Defaults to one bin width.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
        eval_seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a grid.
    Grid {
        /// Grid config (TOML); the standard grid when absent.
        #[arg(long)]
        grid_config: Option<PathBuf>,
        #[arg(long, default_value = "grid")]
        out: PathBuf,
        /// Reuse runs that already completed with the same settings.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Per-token decoding time with and without the memory.
    BenchLatency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1000)]
        tokens: usize,
    },
    /// Write CSV/JSON tables of a finished or partial grid.
    Export {
        #[arg(long)]
        grid_dir: PathBuf,
        /// Defaults to `<grid-dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenBench { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => toml::from_str(&read(&p)?).map_err(|e| Error::Parse(e.to_string()))?,
                None => BenchmarkConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let doc = BenchmarkDoc::generate(cfg)?;
            write(&out, &doc.to_toml()?)?;
            println!("wrote {} tasks to {}", doc.tasks.len(), out.display());
        }
        Command::Train {
            mode,
            steps,
            seed,
            bc,
            k,
            beta,
            suite,
            config,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_toml(&read(&p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = bc {
                cfg.context.bc = b;
            }
            if let Some(k) = k {
                cfg.context.k = k;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if suite.is_some() {
                cfg.suite = suite;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cfg.mode, cfg.seed)));
            let res = run_training(cfg, Some(&out))?;
            if let Some(last) = res.records.last() {
                println!(
                    "step {} accuracy {:.4} imitation_loss {:.4} l1_loss {:.4}",
                    last.step, last.accuracy, last.imitation_loss, last.l1_loss
                );
            }
            if let Some(p) = res.checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval {
            ckpt,
            suite,
            episodes,
            epsilon,
            eval_seed,
            out,
        } => {
            let ev = Evaluator::from_checkpoint(load_checkpoint(&ckpt)?, eval_seed)?;
            let suites = if suite.is_empty() { ev.default_suites() } else { suite };
            let eps = epsilon.unwrap_or_else(|| default_epsilon(ev.config.net.vocab_size));
            let report = ev.evaluate(&suites, episodes, eps)?;
            let text = json(&report)?;
            if let Some(p) = out {
                write(&p, &text)?;
            }
            println!("{text}");
        }
        Command::Grid {
            grid_config,
            out,
            resume,
            jobs,
        } => {
            let mut grid = match grid_config {
                Some(p) => GridConfig::from_toml(&read(&p)?)?,
                None => GridConfig::default(),
            };
            if let Some(j) = jobs {
                grid.jobs = j;
            }
            let res = run_experiment_grid(&grid, &out, resume)?;
            for c in &res.cells {
                println!(
                    "{:<12} average_sr {:.4} ± {:.4} ({} seeds)",
                    c.name(),
                    c.average_sr.mean,
                    c.average_sr.std,
                    c.runs.len()
                );
            }
            println!("runs computed {} steps run {}", res.runs_computed, res.steps_run);
        }
        Command::BenchLatency { ckpt, tokens } => {
            let rep = bench_latency(&load_checkpoint(&ckpt)?, tokens)?;
            println!("{}", json(&rep)?);
        }
        Command::Export { grid_dir, out } => {
            let grid = GridResult::load(&grid_dir)?;
            let out = out.unwrap_or_else(|| grid_dir.join("report"));
            let files = export_report(&grid, &out)?;
            for p in [files.cells_csv, files.summary_json, files.curves_csv] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Runs the command line; returns 0 on success, 1 on a usage error and 2
/// when the command itself fails.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

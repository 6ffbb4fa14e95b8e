//! Plot-ready exports of a grid result.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::grid::{Aggregate, GridResult};
use crate::error::{Error, Result};
use crate::trainer::{Mode, CSV_HEADER};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    /// One row per cell × seed.
    pub cells_csv: PathBuf,
    /// Seed means and standard deviations per cell.
    pub summary_json: PathBuf,
    /// Training curves in long format, one row per logged step.
    pub curves_csv: PathBuf,
}

#[derive(Serialize)]
struct CellSummary<'a> {
    cell: &'a str,
    mode: Mode,
    seeds: Vec<u64>,
    average_sr: Aggregate,
    suite_sr: &'a BTreeMap<String, Aggregate>,
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    cells: Vec<CellSummary<'a>>,
}

/// Suites in order of first appearance.
fn suite_columns(grid: &GridResult) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for run in grid.cells.iter().flat_map(|c| &c.runs) {
        for s in &run.report.suites {
            if !cols.contains(&s.suite) {
                cols.push(s.suite.clone());
            }
        }
    }
    cols
}

pub fn cells_csv(grid: &GridResult) -> String {
    let suites = suite_columns(grid);
    let mut out = String::from("cell,mode,seed,checkpoint,epsilon,average_sr,mean_l1");
    for s in &suites {
        let _ = write!(out, ",{s}_sr");
    }
    out.push('\n');
    for cell in &grid.cells {
        for run in &cell.runs {
            let r = &run.report;
            let l1 = if r.suites.is_empty() {
                0.0
            } else {
                r.suites.iter().map(|s| s.mean_l1).sum::<f64>() / r.suites.len() as f64
            };
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                cell.name(),
                r.mode,
                run.seed,
                r.checkpoint,
                r.epsilon,
                r.average_sr,
                l1
            );
            for s in &suites {
                match r.suite(s) {
                    Some(x) => {
                        let _ = write!(out, ",{}", x.success_rate);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn curves_csv(grid: &GridResult) -> String {
    let mut out = format!("cell,seed,{CSV_HEADER}\n");
    for cell in &grid.cells {
        for run in &cell.runs {
            for rec in &run.curve {
                let _ = writeln!(out, "{},{},{}", cell.name(), run.seed, rec.csv_row());
            }
        }
    }
    out
}

pub fn summary_json(grid: &GridResult) -> Result<String> {
    let summary = Summary {
        name: &grid.name,
        cells: grid
            .cells
            .iter()
            .map(|c| CellSummary {
                cell: c.name(),
                mode: c.spec.mode,
                seeds: c.runs.iter().map(|r| r.seed).collect(),
                average_sr: c.average_sr,
                suite_sr: &c.suite_sr,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes `cells.csv`, `summary.json` and `curves.csv` into `dir`.
pub fn export_report(grid: &GridResult, dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        cells_csv: dir.join("cells.csv"),
        summary_json: dir.join("summary.json"),
        curves_csv: dir.join("curves.csv"),
    };
    let write = |p: &Path, text: String| std::fs::write(p, text).map_err(|e| Error::io(p, e));
    write(&files.cells_csv, cells_csv(grid))?;
    write(&files.summary_json, summary_json(grid)?)?;
    write(&files.curves_csv, curves_csv(grid))?;
    Ok(files)
}

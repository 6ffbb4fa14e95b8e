use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::banks::bin_center;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,accuracy,imitation_loss,l1_loss,ms_per_step";

/// Batch statistics of one training step, measured before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub accuracy: f64,
    pub imitation_loss: f64,
    pub l1_loss: f64,
    pub ms_per_step: f64,
}

impl MetricsRecord {
    /// Equality of everything except wall-clock time.
    pub fn same_values(&self, other: &MetricsRecord) -> bool {
        self.step == other.step
            && self.accuracy.to_bits() == other.accuracy.to_bits()
            && self.imitation_loss.to_bits() == other.imitation_loss.to_bits()
            && self.l1_loss.to_bits() == other.l1_loss.to_bits()
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.accuracy, self.imitation_loss, self.l1_loss, self.ms_per_step
        )
    }
}

/// Token statistics of a batch of logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenStats {
    /// Fraction of positions whose argmax equals the target.
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub imitation_loss: f64,
    /// Mean `|center(argmax) - a|` against the continuous actions.
    pub l1_loss: f64,
}

/// Argmax with the lowest index winning ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `logits` is `N×V`; `targets` and `truth` (continuous actions) have one
/// entry per row.
pub fn compute_metrics(logits: &Tensor, targets: &[usize], truth: &[f64]) -> Result<TokenStats> {
    let n = logits.rows();
    let v = logits.cols();
    if n == 0 || targets.len() != n || truth.len() != n {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), truth.len()],
        });
    }
    let (mut hits, mut ce, mut l1) = (0usize, 0.0, 0.0);
    for ((i, &t), &a) in targets.iter().enumerate().zip(truth) {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(i);
        let k = argmax(row);
        hits += usize::from(k == t);
        let m = row[k];
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        ce += lse - row[t];
        l1 += (bin_center(k, v) - a).abs();
    }
    let nf = n as f64;
    Ok(TokenStats {
        accuracy: hits as f64 / nf,
        imitation_loss: ce / nf,
        l1_loss: l1 / nf,
    })
}

/// Appends records to `metrics.jsonl` and `metrics.csv` in a run directory.
#[derive(Debug)]
pub struct MetricsSink {
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

impl MetricsSink {
    /// Truncates existing files when `append` is false.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("metrics.csv");
        let fresh_csv = !append || !csv_path.exists();
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        let jsonl = BufWriter::new(open(&jsonl_path)?);
        let mut csv = BufWriter::new(open(&csv_path)?);
        if fresh_csv {
            writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        }
        Ok(MetricsSink {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(&self.jsonl_path, e))?;
        writeln!(self.csv, "{}", rec.csv_row()).map_err(|e| Error::io(&self.csv_path, e))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.jsonl.flush().map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

/// Parses a metrics JSONL stream; blank lines are skipped.
pub fn parse_metrics_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

//! Per-token decoding cost of the memory relative to the bare decoder.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_memory, Evaluator, DEFAULT_EVAL_SEED};
use crate::error::{Error, Result};
use crate::nets::EpisodeTokens;
use crate::trainer::{argmax, Checkpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Median wall time of one decoded token with the bare decoder.
    pub base_ms: f64,
    /// Same, with memory fusion active.
    pub mar_ms: f64,
    /// `(mar_ms - base_ms) / base_ms`.
    pub overhead: f64,
    /// Median time to encode the context set and freeze the memory; paid
    /// once per refresh, not per token.
    pub context_encode_ms: f64,
    /// Tokens decoded per arm.
    pub n_tokens: usize,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

const ENCODE_REPEATS: usize = 5;

/// Decodes at least `n_tokens` tokens one at a time, timing both arms on the
/// same prefix and alternating which goes first.
pub fn bench_latency(ck: &Checkpoint, n_tokens: usize) -> Result<LatencyReport> {
    if !ck.config.mode.is_meta() {
        return Err(Error::Config(format!(
            "latency needs a checkpoint with memory, got mode {}",
            ck.config.mode
        )));
    }
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be positive".into()));
    }
    let with_mem = Evaluator::from_checkpoint(ck.clone(), DEFAULT_EVAL_SEED)?;
    let bare = Evaluator {
        memory: None,
        ..with_mem.clone()
    };

    let mut encode = Vec::with_capacity(ENCODE_REPEATS);
    for _ in 0..ENCODE_REPEATS {
        let mut banks = with_mem.banks.clone();
        let t0 = Instant::now();
        build_memory(&with_mem.config, &with_mem.bench, &mut banks, &with_mem.store, DEFAULT_EVAL_SEED)?;
        encode.push(t0.elapsed().as_secs_f64() * 1e3);
    }

    let suites = with_mem.default_suites();
    let pool: Vec<_> = suites
        .iter()
        .map(|s| with_mem.eval_episodes(s, 1))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut base_ms = Vec::with_capacity(n_tokens);
    let mut mar_ms = Vec::with_capacity(n_tokens);
    let mut warm = true;
    let mut i = 0usize;
    while base_ms.len() < n_tokens {
        let ep = pool[i % pool.len()];
        i += 1;
        let mut prefix = EpisodeTokens {
            actions: Vec::new(),
            ..with_mem.bench.tokens(ep)
        };
        for j in 0..ep.tokens.len() {
            let batch = std::slice::from_ref(&prefix);
            let time = |ev: &Evaluator| -> Result<(f64, Vec<f64>)> {
                let t0 = Instant::now();
                let mut rows = ev.next_logits(batch)?;
                Ok((t0.elapsed().as_secs_f64() * 1e3, rows.pop().unwrap_or_default()))
            };
            let (tb, tm, row) = if j % 2 == 0 {
                let (tb, _) = time(&bare)?;
                let (tm, row) = time(&with_mem)?;
                (tb, tm, row)
            } else {
                let (tm, row) = time(&with_mem)?;
                let (tb, _) = time(&bare)?;
                (tb, tm, row)
            };
            if !warm {
                base_ms.push(tb);
                mar_ms.push(tm);
            }
            prefix.actions.push(argmax(&row));
        }
        warm = false;
    }
    let base = median(&mut base_ms);
    let mar = median(&mut mar_ms);
    Ok(LatencyReport {
        base_ms: base,
        mar_ms: mar,
        overhead: (mar - base) / base,
        context_encode_ms: median(&mut encode),
        n_tokens: base_ms.len(),
    })
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Masking, Segment};
use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BACKBONE: &str = "bb";

/// Width and depth of the action decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Action-token vocabulary (number of bins).
    pub vocab_size: usize,
    /// Instruction-code vocabulary.
    pub n_instructions: usize,
    pub max_positions: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 32,
            n_instructions: 64,
            max_positions: 64,
            mlp_ratio: 4,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.max_positions < 3 || self.n_instructions == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("degenerate backbone dimensions".into()));
        }
        Ok(())
    }
}

/// One demonstration laid out for the decoder: `[instruction, observation,
/// a_1, …, a_n]`. Position `i` (for `1 <= i <= n`) predicts `a_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTokens {
    pub instruction: usize,
    /// Observation already mapped to `d_model` by its task adapter.
    pub observation: Vec<f64>,
    pub actions: Vec<usize>,
}

impl EpisodeTokens {
    pub fn positions(&self) -> usize {
        self.actions.len() + 2
    }

    /// Rows whose logits predict the action tokens.
    pub fn predict_rows(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.actions.len()
    }
}

/// Stacked decoder output for a batch of episodes.
#[derive(Clone, Debug)]
pub struct BatchDecode {
    /// Final-norm hidden states, all positions of all episodes stacked.
    pub hidden: Var,
    pub logits: Var,
    pub segments: Vec<Segment>,
    /// Stacked row index of every predicting position, in episode order.
    pub predict_rows: Vec<usize>,
    /// Episode index of each entry of `predict_rows`.
    pub predict_episode: Vec<usize>,
    /// Target token for each entry of `predict_rows`.
    pub targets: Vec<usize>,
}

pub fn init_backbone<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    cfg: &NetConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std = cfg.init_std;
    store.insert(
        format!("{BACKBONE}.tok_emb"),
        Tensor::randn(&[cfg.vocab_size, d], std, rng),
    )?;
    store.insert(
        format!("{BACKBONE}.instr_emb"),
        Tensor::randn(&[cfg.n_instructions, d], std, rng),
    )?;
    store.insert(
        format!("{BACKBONE}.pos_emb"),
        Tensor::randn(&[cfg.max_positions, d], std, rng),
    )?;
    layers::init_linear(store, &format!("{BACKBONE}.obs_in"), d, d, 1.0 / (d as f64).sqrt(), rng)?;
    for l in 0..cfg.n_layers {
        layers::init_block(store, &format!("{BACKBONE}.layer{l}"), d, cfg.mlp_ratio, std, rng)?;
    }
    layers::init_layer_norm(store, &format!("{BACKBONE}.ln_f"), d)?;
    layers::init_linear(store, &format!("{BACKBONE}.head"), d, cfg.vocab_size, std, rng)
}

/// Stacks the batch into decoder inputs and runs the causal stack.
pub fn decode_batch(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &NetConfig,
    episodes: &[EpisodeTokens],
) -> Result<BatchDecode> {
    let hidden_out = backbone_hidden(tape, store, cfg, episodes)?;
    let logits = output_head(tape, store, hidden_out.hidden)?;
    Ok(BatchDecode {
        logits,
        ..hidden_out
    })
}

/// Applies the shared output head to hidden rows.
pub fn output_head(tape: &mut Tape, store: &ParameterStore, hidden: Var) -> Result<Var> {
    layers::linear(tape, store, &format!("{BACKBONE}.head"), hidden)
}

/// [`output_head`] on a plain tensor.
pub fn output_head_frozen(store: &ParameterStore, hidden: &Tensor) -> Result<Tensor> {
    layers::linear_frozen(store, &format!("{BACKBONE}.head"), hidden)
}

/// Everything of [`decode_batch`] except the output head (`logits` is set to
/// the hidden state node).
pub fn backbone_hidden(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &NetConfig,
    episodes: &[EpisodeTokens],
) -> Result<BatchDecode> {
    if episodes.is_empty() {
        return Err(Error::Config("empty episode batch".into()));
    }
    let d = cfg.d_model;
    let b = episodes.len();
    let mut codes = Vec::with_capacity(b);
    let mut obs = Vec::with_capacity(b * d);
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(b);
    let mut predict_rows = Vec::new();
    let mut predict_episode = Vec::new();
    let mut targets = Vec::new();
    let total_tokens: usize = episodes.iter().map(|e| e.actions.len()).sum();
    // Row of each stacked position inside concat([instr; obs; tokens]).
    let mut order = Vec::new();
    let mut tok_offset = 0;
    let mut start = 0;
    for (e, ep) in episodes.iter().enumerate() {
        let p = ep.positions();
        if p > cfg.max_positions {
            return Err(Error::EpisodeTooLong {
                len: p,
                max: cfg.max_positions,
            });
        }
        if ep.observation.len() != d {
            return Err(Error::ShapeMismatch {
                op: "episode observation",
                lhs: vec![ep.observation.len()],
                rhs: vec![d],
            });
        }
        if ep.instruction >= cfg.n_instructions {
            return Err(Error::TokenOutOfRange {
                id: ep.instruction,
                vocab: cfg.n_instructions,
            });
        }
        if let Some(&id) = ep.actions.iter().find(|&&a| a >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        codes.push(ep.instruction);
        obs.extend_from_slice(&ep.observation);
        tokens.extend_from_slice(&ep.actions);
        order.push(e);
        order.push(b + e);
        for i in 0..ep.actions.len() {
            order.push(2 * b + tok_offset + i);
        }
        positions.extend(0..p);
        for (i, &a) in ep.actions.iter().enumerate() {
            predict_rows.push(start + 1 + i);
            predict_episode.push(e);
            targets.push(a);
        }
        segments.push(Segment { start, len: p });
        tok_offset += ep.actions.len();
        start += p;
    }
    debug_assert_eq!(tok_offset, total_tokens);

    let instr_tab = tape.param(store, &format!("{BACKBONE}.instr_emb"));
    let instr = tape.gather_rows(instr_tab, codes)?;
    let obs = tape.constant(Tensor::from_parts(vec![b, d], obs));
    let obs = layers::linear(tape, store, &format!("{BACKBONE}.obs_in"), obs)?;
    let mut parts = vec![instr, obs];
    if !tokens.is_empty() {
        let tok_tab = tape.param(store, &format!("{BACKBONE}.tok_emb"));
        parts.push(tape.gather_rows(tok_tab, tokens)?);
    }
    let stacked = tape.concat_rows(&parts)?;
    let x = tape.gather_rows(stacked, order)?;
    let pos_tab = tape.param(store, &format!("{BACKBONE}.pos_emb"));
    let pos = tape.gather_rows(pos_tab, positions)?;
    let mut h = tape.add(x, pos)?;
    for l in 0..cfg.n_layers {
        h = layers::transformer_block(
            tape,
            store,
            &format!("{BACKBONE}.layer{l}"),
            h,
            cfg.n_heads,
            Masking::Causal,
            Some(&segments),
            cfg.ln_eps,
        )?;
    }
    let hidden = layers::layer_norm(tape, store, &format!("{BACKBONE}.ln_f"), h, cfg.ln_eps)?;
    Ok(BatchDecode {
        hidden,
        logits: hidden,
        segments,
        predict_rows,
        predict_episode,
        targets,
    })
}

/// Decodes a single episode: `(hidden p×d, logits p×V)`.
pub fn decode_episode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &NetConfig,
    episode: &EpisodeTokens,
) -> Result<(Var, Var)> {
    let out = decode_batch(tape, store, cfg, std::slice::from_ref(episode))?;
    Ok((out.hidden, out.logits))
}

/// Mean of the hidden rows listed in `rows`.
pub fn pool_episode(tape: &mut Tape, hidden: Var, rows: &[usize]) -> Result<Var> {
    tape.mean_rows(hidden, rows)
}

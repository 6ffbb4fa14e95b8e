//! The context memory module.
//!
//! Context demonstrations are summarized as feature/action pairs
//! `(x_C, y_C)`. A deterministic self-attention stack turns each pair into
//! `r_C`; target hidden states cross-attend over keys `x_C` and values `r_C`
//! to give `r_T`. An independent latent stack is mean-pooled into `s̄` and
//! mapped to a diagonal Gaussian over `z`. `[h_T ‖ r_T ‖ z]` is projected and
//! added back onto `h_T` before the decoder's output head.

mod inference;

pub use inference::InferenceContext;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::layers::{self, Masking, Segment};
use crate::nets::{self, BatchDecode, EpisodeTokens, NetConfig};

pub const MAR: &str = "mar";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarVariant {
    /// `r_T` only; trained on reconstruction alone.
    Deterministic,
    /// `r_T` plus a latent `z`; trained on the variational bound.
    Stochastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarConfig {
    pub variant: MarVariant,
    pub n_heads: usize,
    /// Self-attention blocks per path.
    pub n_layers: usize,
    pub d_latent: usize,
    /// KL weight.
    pub beta: f64,
    pub init_std: f64,
    /// `log_var` is clamped to `[-bound, bound]`.
    pub log_var_bound: f64,
}

impl Default for MarConfig {
    fn default() -> Self {
        MarConfig {
            variant: MarVariant::Deterministic,
            n_heads: 4,
            n_layers: 1,
            d_latent: 64,
            beta: 1.0,
            init_std: 0.02,
            log_var_bound: 10.0,
        }
    }
}

impl MarConfig {
    pub fn stochastic(&self) -> bool {
        self.variant == MarVariant::Stochastic && self.d_latent > 0
    }

    /// Width of the fusion projector's input.
    pub fn fusion_width(&self, d_model: usize) -> usize {
        2 * d_model + if self.stochastic() { self.d_latent } else { 0 }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_heads == 0 || d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "MAR heads {} do not divide d_model {d_model}",
                self.n_heads
            )));
        }
        if !(self.beta >= 0.0) || !(self.log_var_bound > 0.0) {
            return Err(Error::Config("beta must be >= 0 and log_var_bound > 0".into()));
        }
        Ok(())
    }
}

/// One context demonstration summarized for the memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPairEncoding {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub task: usize,
}

/// A whole context set as stacked `n×d` feature and action summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPairs {
    pub x: Tensor,
    pub y: Tensor,
    pub tasks: Vec<usize>,
}

impl ContextPairs {
    pub fn from_pairs(pairs: &[ContextPairEncoding]) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyContext)?;
        let d = first.x.len();
        let mut x = Vec::with_capacity(pairs.len() * d);
        let mut y = Vec::with_capacity(pairs.len() * d);
        for p in pairs {
            if p.x.len() != d || p.y.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "context pair",
                    lhs: vec![p.x.len(), p.y.len()],
                    rhs: vec![d, d],
                });
            }
            x.extend_from_slice(&p.x);
            y.extend_from_slice(&p.y);
        }
        Ok(ContextPairs {
            x: Tensor::new(vec![pairs.len(), d], x)?,
            y: Tensor::new(vec![pairs.len(), d], y)?,
            tasks: pairs.iter().map(|p| p.task).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn pair(&self, i: usize) -> ContextPairEncoding {
        ContextPairEncoding {
            x: self.x.row(i).to_vec(),
            y: self.y.row(i).to_vec(),
            task: self.tasks[i],
        }
    }
}

/// Diagonal Gaussian, one row per distribution.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mu: Var,
    pub log_var: Var,
}

/// Encoded context set on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ContextEncoding {
    /// Keys for cross-attention (`n×d`).
    pub x_c: Var,
    /// Deterministic path outputs (`n×d`).
    pub r_set: Var,
    /// Mean of the latent path outputs (`1×d`), stochastic variant only.
    pub s_bar: Option<Var>,
}

/// Per-target-position memory readout and latent distributions.
#[derive(Clone, Debug)]
pub struct MarOutput {
    pub r_t: Var,
    /// One latent row per episode.
    pub z: Option<Var>,
    pub q_context: Option<GaussianParams>,
    pub q_target: Option<GaussianParams>,
}

pub(crate) fn p(name: &str) -> String {
    format!("{MAR}.{name}")
}

pub fn init_mar<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    cfg: &MarConfig,
    d_model: usize,
    mlp_ratio: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate(d_model)?;
    let std = cfg.init_std;
    layers::init_linear(store, &p("det.in"), 2 * d_model, d_model, std, rng)?;
    for l in 0..cfg.n_layers {
        layers::init_block(store, &p(&format!("det.block{l}")), d_model, mlp_ratio, std, rng)?;
    }
    layers::init_attention(store, &p("cross"), d_model, std, rng)?;
    if cfg.stochastic() {
        layers::init_linear(store, &p("lat.in"), 2 * d_model, d_model, std, rng)?;
        for l in 0..cfg.n_layers {
            layers::init_block(store, &p(&format!("lat.block{l}")), d_model, mlp_ratio, std, rng)?;
        }
        layers::init_linear(store, &p("lat.head1"), d_model, d_model, std, rng)?;
        layers::init_linear(store, &p("lat.head2"), d_model, 2 * cfg.d_latent, std, rng)?;
    }
    let w = cfg.fusion_width(d_model);
    store.insert(p("fuse.w"), Tensor::zeros(&[w, d_model]))?;
    store.insert(p("fuse.b"), Tensor::zeros(&[d_model]))
}

fn pair_stack(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &MarConfig,
    path: &str,
    x: Var,
    y: Var,
    segments: Option<&[Segment]>,
    eps: f64,
) -> Result<Var> {
    let xy = tape.concat_cols(&[x, y])?;
    let mut h = layers::linear(tape, store, &p(&format!("{path}.in")), xy)?;
    for l in 0..cfg.n_layers {
        h = layers::transformer_block(
            tape,
            store,
            &p(&format!("{path}.block{l}")),
            h,
            cfg.n_heads,
            Masking::Full,
            segments,
            eps,
        )?;
    }
    Ok(h)
}

/// Runs both paths over the context set. Attention is bidirectional over the
/// context elements, so `s̄` is invariant to their order and `r_set` permutes
/// with it.
pub fn encode_context(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &MarConfig,
    pairs: &ContextPairs,
    eps: f64,
) -> Result<ContextEncoding> {
    if pairs.is_empty() {
        return Err(Error::EmptyContext);
    }
    let x_c = tape.constant(pairs.x.clone());
    let y_c = tape.constant(pairs.y.clone());
    let r_set = pair_stack(tape, store, cfg, "det", x_c, y_c, None, eps)?;
    let s_bar = if cfg.stochastic() {
        let s = pair_stack(tape, store, cfg, "lat", x_c, y_c, None, eps)?;
        let all: Vec<usize> = (0..pairs.len()).collect();
        Some(tape.mean_rows(s, &all)?)
    } else {
        None
    };
    Ok(ContextEncoding { x_c, r_set, s_bar })
}

/// Latent-path summaries of individual pairs: row `i` is `s̄` of the set
/// holding only pair `i`.
pub fn encode_single_pairs(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &MarConfig,
    x: Var,
    y: Var,
    eps: f64,
) -> Result<Var> {
    let n = tape.value(x).rows();
    let segs: Vec<Segment> = (0..n).map(|start| Segment { start, len: 1 }).collect();
    pair_stack(tape, store, cfg, "lat", x, y, Some(&segs), eps)
}

/// Key and value projections of the cross-attention, reusable across calls.
pub fn project_memory(
    tape: &mut Tape,
    store: &ParameterStore,
    x_c: Var,
    r_set: Var,
) -> Result<(Var, Var)> {
    let k = layers::linear(tape, store, &p("cross.wk"), x_c)?;
    let v = layers::linear(tape, store, &p("cross.wv"), r_set)?;
    Ok((k, v))
}

/// Cross-attention with already projected keys and values.
pub fn attend_projected(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &MarConfig,
    h_t: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let d = tape.value(h_t).cols();
    let dh = d / cfg.n_heads;
    let q = layers::linear(tape, store, &p("cross.wq"), h_t)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        heads.push(layers::scaled_dot_attention(tape, qh, kh, vh, None)?);
    }
    let merged = if cfg.n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    layers::linear(tape, store, &p("cross.wo"), merged)
}

/// `r_T`: target hidden rows attend over keys from `x_C` and values `r_C`.
pub fn cross_attend(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &MarConfig,
    h_t: Var,
    x_c: Var,
    r_set: Var,
) -> Result<Var> {
    let (nk, nv) = (tape.value(x_c).rows(), tape.value(r_set).rows());
    if nk != nv {
        return Err(Error::ShapeMismatch {
            op: "cross_attend",
            lhs: vec![nk],
            rhs: vec![nv],
        });
    }
    let (k, v) = project_memory(tape, store, x_c, r_set)?;
    attend_projected(tape, store, cfg, h_t, k, v)
}

/// Two-layer head `s̄ → (mu, clamp(log_var))`, row-wise.
pub fn latent_distribution(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &MarConfig,
    s_bar: Var,
) -> Result<GaussianParams> {
    let h = layers::linear(tape, store, &p("lat.head1"), s_bar)?;
    let h = tape.gelu(h);
    let out = layers::linear(tape, store, &p("lat.head2"), h)?;
    let mu = tape.slice_cols(out, 0, cfg.d_latent)?;
    let raw = tape.slice_cols(out, cfg.d_latent, cfg.d_latent)?;
    let log_var = tape.clamp(raw, -cfg.log_var_bound, cfg.log_var_bound);
    Ok(GaussianParams { mu, log_var })
}

/// `z = mu + exp(log_var / 2) ⊙ noise`.
pub fn reparameterize(tape: &mut Tape, g: &GaussianParams, noise: &Tensor) -> Result<Var> {
    let half = tape.affine(g.log_var, 0.5, 0.0);
    let sigma = tape.exp(half);
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(sigma, eps)?;
    tape.add(g.mu, scaled)
}

fn broadcast_rows(tape: &mut Tape, x: Var, rows: usize) -> Result<Var> {
    let have = tape.value(x).rows();
    if have == rows {
        Ok(x)
    } else if have == 1 {
        tape.gather_rows(x, vec![0usize; rows])
    } else {
        Err(Error::ShapeMismatch {
            op: "broadcast_rows",
            lhs: vec![have],
            rhs: vec![rows],
        })
    }
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians, summed over coordinates
/// and averaged over rows. A single-row `p` is shared by every row of `q`.
pub fn kl_diag_gaussian(tape: &mut Tape, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    let rows = tape.value(q.mu).rows();
    let p_mu = broadcast_rows(tape, p.mu, rows)?;
    let p_lv = broadcast_rows(tape, p.log_var, rows)?;
    // ½[exp(lq − lp) + (μp − μq)²·exp(−lp) − 1 + lp − lq]
    let dlv = tape.sub(q.log_var, p_lv)?;
    let ratio = tape.exp(dlv);
    let dmu = tape.sub(p_mu, q.mu)?;
    let sq = tape.mul(dmu, dmu)?;
    let neg_lp = tape.scale(p_lv, -1.0);
    let inv_p = tape.exp(neg_lp);
    let maha = tape.mul(sq, inv_p)?;
    let a = tape.add(ratio, maha)?;
    let b = tape.sub(a, dlv)?;
    let c = tape.affine(b, 1.0, -1.0);
    let total = tape.sum(c);
    Ok(tape.scale(total, 0.5 / rows as f64))
}

/// `head(h_T + W_f·[h_T ‖ r_T ‖ z] + b_f)`; `z_rows` is already broadcast to
/// one row per target position.
pub fn fuse_and_decode(
    tape: &mut Tape,
    store: &ParameterStore,
    h_t: Var,
    r_t: Var,
    z_rows: Option<Var>,
) -> Result<Var> {
    let mut parts = vec![h_t, r_t];
    parts.extend(z_rows);
    let cat = tape.concat_cols(&parts)?;
    let proj = layers::linear(tape, store, &p("fuse"), cat)?;
    let fused = tape.add(h_t, proj)?;
    nets::output_head(tape, store, fused)
}

#[derive(Clone, Copy, Debug)]
pub struct MarLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Option<Var>,
}

/// Cross-entropy reconstruction, plus `beta · KL(q_target ‖ q_context)` in the
/// stochastic variant.
#[allow(clippy::too_many_arguments)]
pub fn mar_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    q_target: Option<&GaussianParams>,
    q_context: Option<&GaussianParams>,
    variant: MarVariant,
    beta: f64,
) -> Result<MarLoss> {
    let reconstruction = tape.cross_entropy(logits, targets, mask)?;
    match (variant, q_target, q_context) {
        (MarVariant::Deterministic, None, None) => Ok(MarLoss {
            total: reconstruction,
            reconstruction,
            kl: None,
        }),
        (MarVariant::Stochastic, Some(qt), Some(qc)) => {
            let kl = kl_diag_gaussian(tape, qt, qc)?;
            let weighted = tape.scale(kl, beta);
            let total = tape.add(reconstruction, weighted)?;
            Ok(MarLoss {
                total,
                reconstruction,
                kl: Some(kl),
            })
        }
        (MarVariant::Stochastic, _, _) => Err(Error::Protocol(
            "stochastic loss needs both target and context Gaussians".into(),
        )),
        (MarVariant::Deterministic, _, _) => Err(Error::Protocol(
            "deterministic loss takes no Gaussians".into(),
        )),
    }
}

/// Feature/action summaries of context episodes from a frozen backbone pass:
/// `x` pools the instruction and observation slots, `y` pools the hidden
/// states of the action-token slots.
pub fn encode_pairs(
    store: &ParameterStore,
    net: &NetConfig,
    episodes: &[EpisodeTokens],
    tasks: &[usize],
) -> Result<ContextPairs> {
    if episodes.is_empty() {
        return Err(Error::EmptyContext);
    }
    let d = net.d_model;
    let mut x = Vec::with_capacity(episodes.len() * d);
    let mut y = Vec::with_capacity(episodes.len() * d);
    // Bounded chunks keep the record small.
    for chunk in episodes.chunks(64) {
        let mut tape = Tape::new();
        let out = nets::backbone_hidden(&mut tape, store, net, chunk)?;
        let hidden = tape.value(out.hidden);
        for (ep, seg) in chunk.iter().zip(&out.segments) {
            pool_into(hidden, &[seg.start, seg.start + 1], &mut x);
            let acts: Vec<usize> = (0..ep.actions.len()).map(|i| seg.start + 2 + i).collect();
            if acts.is_empty() {
                return Err(Error::EmptyMask("context episode actions"));
            }
            pool_into(hidden, &acts, &mut y);
        }
    }
    let n = episodes.len();
    Ok(ContextPairs {
        x: Tensor::new(vec![n, d], x)?,
        y: Tensor::new(vec![n, d], y)?,
        tasks: tasks.to_vec(),
    })
}

fn pool_into(hidden: &Tensor, rows: &[usize], out: &mut Vec<f64>) {
    let d = hidden.cols();
    let start = out.len();
    out.resize(start + d, 0.0);
    for &r in rows {
        for (o, v) in out[start..].iter_mut().zip(hidden.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    out[start..].iter_mut().for_each(|o| *o *= inv);
}

/// Target pair summaries built on the tape from the batch's own hidden
/// states, so the backbone receives gradient through them.
pub fn target_pairs(tape: &mut Tape, decode: &BatchDecode) -> Result<(Var, Var)> {
    let b = decode.segments.len();
    let mut xs = Vec::with_capacity(b);
    let mut ys = Vec::with_capacity(b);
    for seg in &decode.segments {
        xs.push(tape.mean_rows(decode.hidden, &[seg.start, seg.start + 1])?);
        let acts: Vec<usize> = (seg.start + 2..seg.start + seg.len).collect();
        ys.push(tape.mean_rows(decode.hidden, &acts)?);
    }
    Ok((tape.concat_rows(&xs)?, tape.concat_rows(&ys)?))
}

/// Decoder plus memory forward for a target batch.
#[derive(Clone, Debug)]
pub struct MetaForward {
    /// Logits at every predicting position (`N×V`, episode order).
    pub logits: Var,
    pub targets: Vec<usize>,
    pub predict_episode: Vec<usize>,
    pub output: MarOutput,
    pub loss: MarLoss,
}

/// Training-mode forward: decodes `episodes`, reads the memory, samples one
/// `z` per episode from `q_target` using `noise` (`B×d_latent`), and builds
/// the objective.
pub fn meta_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    net: &NetConfig,
    cfg: &MarConfig,
    episodes: &[EpisodeTokens],
    context: &ContextPairs,
    noise: Option<&Tensor>,
) -> Result<MetaForward> {
    let decode = nets::backbone_hidden(tape, store, net, episodes)?;
    let h_t = tape.gather_rows(decode.hidden, decode.predict_rows.clone())?;
    let enc = encode_context(tape, store, cfg, context, net.ln_eps)?;
    let r_t = cross_attend(tape, store, cfg, h_t, enc.x_c, enc.r_set)?;
    let (z_rows, z, q_context, q_target) = if cfg.stochastic() {
        let s_bar = enc.s_bar.expect("stochastic encoding");
        let qc = latent_distribution(tape, store, cfg, s_bar)?;
        let (xt, yt) = target_pairs(tape, &decode)?;
        let s_t = encode_single_pairs(tape, store, cfg, xt, yt, net.ln_eps)?;
        let qt = latent_distribution(tape, store, cfg, s_t)?;
        let noise = noise.ok_or_else(|| Error::Protocol("stochastic forward needs noise".into()))?;
        let z = reparameterize(tape, &qt, noise)?;
        let z_rows = tape.gather_rows(z, decode.predict_episode.clone())?;
        (Some(z_rows), Some(z), Some(qc), Some(qt))
    } else {
        (None, None, None, None)
    };
    let logits = fuse_and_decode(tape, store, h_t, r_t, z_rows)?;
    let mask = vec![true; decode.targets.len()];
    let loss = mar_loss(
        tape,
        logits,
        &decode.targets,
        &mask,
        q_target.as_ref(),
        q_context.as_ref(),
        cfg.variant,
        cfg.beta,
    )?;
    Ok(MetaForward {
        logits,
        targets: decode.targets,
        predict_episode: decode.predict_episode,
        output: MarOutput {
            r_t,
            z,
            q_context,
            q_target,
        },
        loss,
    })
}

use rand::Rng;

use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which keys a query row may attend to inside one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Masking {
    /// Every key.
    Full,
    /// Keys at positions `<=` the query position.
    Causal,
}

/// A contiguous run of rows `[start, start + len)` forming one sequence in a
/// stacked batch. Attention never crosses segment boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

pub(crate) fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), Tensor::randn(&[d_in, d_out], std, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))
}

pub fn init_layer_norm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

/// `x · W + b` for the `{prefix}.w` / `{prefix}.b` pair.
pub fn linear(tape: &mut Tape, store: &ParameterStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// [`linear`] on a plain tensor, for inference.
pub fn linear_frozen(store: &ParameterStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let get = |s: &str| {
        let name = format!("{prefix}.{s}");
        store
            .get(&name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    };
    x.matmul(get("w")?)?.add_row(get("b")?)
}

pub fn layer_norm(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.g"));
    let b = tape.param(store, &format!("{prefix}.b"));
    tape.layer_norm(x, g, b, eps)
}

/// `softmax(Q·Kᵀ/√d + mask)·V`.
///
/// `allowed` is a row-major `q × k` table of attendable pairs. A query row
/// with no attendable key is rejected.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let (nk, nv) = (tape.value(k).rows(), tape.value(v).rows());
    if nk != nv {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: tape.value(k).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        });
    }
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = match allowed {
        Some(a) => tape.masked_softmax(scores, a)?,
        None => tape.softmax(scores),
    };
    tape.matmul(weights, v)
}

pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    d_model: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.{proj}"), d_model, d_model, std, rng)?;
    }
    Ok(())
}

/// Multi-head attention of `x_q` rows over keys from `x_k` and values from
/// `x_v` (one row per key).
///
/// With `segments = None` every query sees every key (subject to `masking`
/// applied over the full index range). With segments, queries and keys share
/// row indexing and attention stays inside each segment.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x_q: Var,
    x_k: Var,
    x_v: Var,
    n_heads: usize,
    masking: Masking,
    segments: Option<&[Segment]>,
) -> Result<Var> {
    let d_model = tape.value(x_q).cols();
    if n_heads == 0
        || d_model % n_heads != 0
        || tape.value(x_k).cols() != d_model
        || tape.value(x_v).cols() != d_model
    {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.value(x_q).shape().to_vec(),
            rhs: tape.value(x_k).shape().to_vec(),
        });
    }
    let d_head = d_model / n_heads;
    let q = linear(tape, store, &format!("{prefix}.wq"), x_q)?;
    let k = linear(tape, store, &format!("{prefix}.wk"), x_k)?;
    let v = linear(tape, store, &format!("{prefix}.wv"), x_v)?;

    let (nq, nk) = (tape.value(q).rows(), tape.value(k).rows());
    let whole = [Segment { start: 0, len: nq }];
    let segs: &[Segment] = match segments {
        Some(s) => s,
        None => &whole,
    };
    if segments.is_some() && nq != nk {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: vec![nq],
            rhs: vec![nk],
        });
    }

    let mut seg_outputs = Vec::with_capacity(segs.len());
    let mut mask_cache: Option<(usize, Vec<bool>)> = None;
    for seg in segs {
        let (qs, ks, vs) = if segments.is_some() {
            (
                tape.slice_rows(q, seg.start, seg.len)?,
                tape.slice_rows(k, seg.start, seg.len)?,
                tape.slice_rows(v, seg.start, seg.len)?,
            )
        } else {
            (q, k, v)
        };
        let allowed = match masking {
            Masking::Full => None,
            Masking::Causal => {
                let key_len = if segments.is_some() { seg.len } else { nk };
                if seg.len != key_len {
                    return Err(Error::ShapeMismatch {
                        op: "causal attention",
                        lhs: vec![seg.len],
                        rhs: vec![key_len],
                    });
                }
                if mask_cache.as_ref().map(|(n, _)| *n) != Some(seg.len) {
                    mask_cache = Some((seg.len, causal_mask(seg.len)));
                }
                mask_cache.as_ref().map(|(_, m)| m.as_slice())
            }
        };
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (qs, ks, vs)
            } else {
                (
                    tape.slice_cols(qs, h * d_head, d_head)?,
                    tape.slice_cols(ks, h * d_head, d_head)?,
                    tape.slice_cols(vs, h * d_head, d_head)?,
                )
            };
            heads.push(scaled_dot_attention(tape, qh, kh, vh, allowed)?);
        }
        let merged = if n_heads == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        seg_outputs.push(merged);
    }
    let merged = if seg_outputs.len() == 1 {
        seg_outputs[0]
    } else {
        tape.concat_rows(&seg_outputs)?
    };
    linear(tape, store, &format!("{prefix}.wo"), merged)
}

pub fn init_block<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    prefix: &str,
    d_model: usize,
    mlp_ratio: usize,
    std: f64,
    rng: &mut R,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d_model)?;
    init_attention(store, &format!("{prefix}.attn"), d_model, std, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d_model)?;
    init_linear(store, &format!("{prefix}.mlp1"), d_model, d_model * mlp_ratio, std, rng)?;
    init_linear(store, &format!("{prefix}.mlp2"), d_model * mlp_ratio, d_model, std, rng)
}

/// Pre-norm residual block: `h = x + MHA(LN(x))`, `out = h + MLP(LN(h))`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    n_heads: usize,
    masking: Masking,
    segments: Option<&[Segment]>,
    eps: f64,
) -> Result<Var> {
    let n1 = layer_norm(tape, store, &format!("{prefix}.ln1"), x, eps)?;
    let a = multi_head_attention(
        tape,
        store,
        &format!("{prefix}.attn"),
        n1,
        n1,
        n1,
        n_heads,
        masking,
        segments,
    )?;
    let h = tape.add(x, a)?;
    let n2 = layer_norm(tape, store, &format!("{prefix}.ln2"), h, eps)?;
    let m = linear(tape, store, &format!("{prefix}.mlp1"), n2)?;
    let m = tape.gelu(m);
    let m = linear(tape, store, &format!("{prefix}.mlp2"), m)?;
    tape.add(h, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::matrix(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut t = Tape::new();
        let q = t.constant(rows(&[&[0.3, -1.0], &[5.0, 2.0]]));
        let k = t.constant(rows(&[&[1.0, 1.0]]));
        let v = t.constant(rows(&[&[7.0, -3.0]]));
        let o = scaled_dot_attention(&mut t, q, k, v, None).unwrap();
        assert_eq!(t.value(o), &rows(&[&[7.0, -3.0], &[7.0, -3.0]]));
    }

    #[test]
    fn identical_keys_average_values() {
        let mut t = Tape::new();
        let q = t.constant(rows(&[&[0.3, -1.0]]));
        let k = t.constant(rows(&[&[1.0, 2.0], &[1.0, 2.0]]));
        let v = t.constant(rows(&[&[1.0, 4.0], &[3.0, 0.0]]));
        let o = scaled_dot_attention(&mut t, q, k, v, None).unwrap();
        assert_eq!(t.value(o).data(), &[2.0, 2.0]);
    }

    #[test]
    fn two_key_weights_match_formula() {
        let mut t = Tape::new();
        let q = t.constant(rows(&[&[1.0, 0.0]]));
        let kv = t.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let o = scaled_dot_attention(&mut t, q, kv, kv, None).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let w0 = s.exp() / (s.exp() + 1.0);
        assert!((t.value(o).data()[0] - w0).abs() < 1e-12);
        assert!((t.value(o).data()[1] - (1.0 - w0)).abs() < 1e-12);
        assert!((w0 - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn fully_masked_query_rejected() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[2, 2]));
        let r = scaled_dot_attention(&mut t, q, q, q, Some(&[true, true, false, false]));
        assert!(matches!(r, Err(Error::FullyMaskedRow(1))));
    }

    fn attn_store(d: usize, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        init_attention(&mut s, "a", d, 0.5, &mut rng).unwrap();
        for name in ["a.wq.b", "a.wk.b", "a.wv.b", "a.wo.b"] {
            *s.get_mut(name).unwrap() = Tensor::randn(&[d], 0.3, &mut rng);
        }
        s
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut s = attn_store(4, 1);
        s.zero_prefix("a.wo");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let o = multi_head_attention(&mut t, &s, "a", x, x, x, 2, Masking::Causal, None).unwrap();
        assert!(t.value(o).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_head_is_projected_attention() {
        let s = attn_store(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let o = multi_head_attention(&mut t, &s, "a", x, x, x, 1, Masking::Full, None).unwrap();
        let q = linear(&mut t, &s, "a.wq", x).unwrap();
        let k = linear(&mut t, &s, "a.wk", x).unwrap();
        let v = linear(&mut t, &s, "a.wv", x).unwrap();
        let a = scaled_dot_attention(&mut t, q, k, v, None).unwrap();
        let o2 = linear(&mut t, &s, "a.wo", a).unwrap();
        assert_eq!(t.value(o), t.value(o2));
    }

    #[test]
    fn head_permutation_invariance() {
        let (d, heads) = (8, 4);
        let s = attn_store(d, 3);
        let dh = d / heads;
        let perm = [2usize, 0, 3, 1];
        let mut p = s.clone();
        for name in ["a.wq", "a.wk", "a.wv"] {
            let w = s.get(&format!("{name}.w")).unwrap();
            let b = s.get(&format!("{name}.b")).unwrap();
            let (mut w2, mut b2) = (w.clone(), b.clone());
            for (new_h, &old_h) in perm.iter().enumerate() {
                for c in 0..dh {
                    for r in 0..d {
                        w2.data_mut()[r * d + new_h * dh + c] = w.data()[r * d + old_h * dh + c];
                    }
                    b2.data_mut()[new_h * dh + c] = b.data()[old_h * dh + c];
                }
            }
            *p.get_mut(&format!("{name}.w")).unwrap() = w2;
            *p.get_mut(&format!("{name}.b")).unwrap() = b2;
        }
        let wo = s.get("a.wo.w").unwrap();
        let mut wo2 = wo.clone();
        for (new_h, &old_h) in perm.iter().enumerate() {
            for c in 0..dh {
                let (nr, or) = (new_h * dh + c, old_h * dh + c);
                wo2.data_mut()[nr * d..(nr + 1) * d].copy_from_slice(&wo.data()[or * d..(or + 1) * d]);
            }
        }
        *p.get_mut("a.wo.w").unwrap() = wo2;

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = Tensor::randn(&[5, d], 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.constant(xv);
        let o1 = multi_head_attention(&mut t, &s, "a", x, x, x, heads, Masking::Causal, None).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(t.value(x).clone());
        let o2 = multi_head_attention(&mut t2, &p, "a", x2, x2, x2, heads, Masking::Causal, None).unwrap();
        assert!(t.value(o1).max_abs_diff(t2.value(o2)) < 1e-10);
    }

    #[test]
    fn segmented_attention_matches_separate_calls() {
        let s = attn_store(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let mut t = Tape::new();
        let xa = t.constant(a.clone());
        let xb = t.constant(b.clone());
        let x = t.concat_rows(&[xa, xb]).unwrap();
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
        let o = multi_head_attention(&mut t, &s, "a", x, x, x, 2, Masking::Causal, Some(&segs)).unwrap();
        let oa = multi_head_attention(&mut t, &s, "a", xa, xa, xa, 2, Masking::Causal, None).unwrap();
        let ob = multi_head_attention(&mut t, &s, "a", xb, xb, xb, 2, Masking::Causal, None).unwrap();
        let joined = [t.value(oa).data(), t.value(ob).data()].concat();
        let diff = t
            .value(o)
            .data()
            .iter()
            .zip(&joined)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParameterStore::new();
        init_block(&mut s, "blk", 4, 4, 0.1, &mut rng).unwrap();
        s.zero_prefix("blk");
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let o = transformer_block(&mut t, &s, "blk", x, 2, Masking::Causal, None, 1e-5).unwrap();
        assert_eq!(t.value(o), t.value(x));
    }

    #[test]
    fn causal_block_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = ParameterStore::new();
        init_block(&mut s, "blk", 8, 4, 0.3, &mut rng).unwrap();
        let base = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut changed = base.clone();
        for j in 3 * 8..5 * 8 {
            changed.data_mut()[j] += 0.7;
        }
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let o = transformer_block(&mut t, &s, "blk", v, 2, Masking::Causal, None, 1e-5).unwrap();
            t.value(o).clone()
        };
        let (a, b) = (run(&base), run(&changed));
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8]);
        assert_ne!(&a.data()[3 * 8..], &b.data()[3 * 8..]);
    }

    #[test]
    fn attention_and_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut s = attn_store(8, 13);
        s.insert("x", Tensor::randn(&[4, 8], 1.0, &mut rng)).unwrap();
        let check = check_gradients(&s, 1e-5, |t, s| {
            let x = t.param(s, "x");
            let o = multi_head_attention(t, s, "a", x, x, x, 2, Masking::Causal, None)?;
            let o = t.mul(o, o)?;
            Ok(t.sum(o))
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-4, "{check:?}");

        let mut s = ParameterStore::new();
        init_block(&mut s, "blk", 8, 4, 0.3, &mut rng).unwrap();
        s.insert("x", Tensor::randn(&[4, 8], 1.0, &mut rng)).unwrap();
        let check = check_gradients(&s, 1e-5, |t, s| {
            let x = t.param(s, "x");
            let o = transformer_block(t, s, "blk", x, 2, Masking::Causal, None, 1e-5)?;
            let o = t.mul(o, o)?;
            Ok(t.sum(o))
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-4, "{check:?}");
    }
}

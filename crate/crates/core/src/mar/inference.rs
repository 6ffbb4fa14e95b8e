use super::{
    attend_projected, encode_context, fuse_and_decode, latent_distribution, project_memory,
    ContextPairs, MarConfig,
};
use crate::diffcore::{ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{self, layers};

/// Memory state frozen for decoding: projected keys and values of the active
/// context set and, in the stochastic variant, `z` fixed at the mean of
/// `q(z | s̄_C)`. Built once per context set and reused for every token.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceContext {
    keys: Tensor,
    values: Tensor,
    z: Option<Tensor>,
}

impl InferenceContext {
    pub fn build(
        store: &ParameterStore,
        cfg: &MarConfig,
        context: &ContextPairs,
        ln_eps: f64,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let enc = encode_context(&mut tape, store, cfg, context, ln_eps)?;
        let (k, v) = project_memory(&mut tape, store, enc.x_c, enc.r_set)?;
        let z = match enc.s_bar {
            Some(s) => {
                let q = latent_distribution(&mut tape, store, cfg, s)?;
                Some(tape.value(q.mu).clone())
            }
            None => None,
        };
        Ok(InferenceContext {
            keys: tape.value(k).clone(),
            values: tape.value(v).clone(),
            z,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z(&self) -> Option<&Tensor> {
        self.z.as_ref()
    }

    /// Fused logits for hidden rows `h` (one row per query position).
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        cfg: &MarConfig,
        h: Var,
    ) -> Result<Var> {
        let k = tape.constant(self.keys.clone());
        let v = tape.constant(self.values.clone());
        let r = attend_projected(tape, store, cfg, h, k, v)?;
        let z_rows = match &self.z {
            Some(z) => {
                let zv = tape.constant(z.clone());
                let rows = tape.value(h).rows();
                Some(tape.gather_rows(zv, vec![0usize; rows])?)
            }
            None => None,
        };
        fuse_and_decode(tape, store, h, r, z_rows)
    }

    /// [`Self::logits`] computed directly on tensors, without a graph. The
    /// memory is read in place.
    pub fn logits_frozen(&self, store: &ParameterStore, cfg: &MarConfig, h: &Tensor) -> Result<Tensor> {
        let d = h.cols();
        if cfg.n_heads == 0 || d % cfg.n_heads != 0 || self.keys.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "logits_frozen",
                lhs: h.shape().to_vec(),
                rhs: self.keys.shape().to_vec(),
            });
        }
        let dh = d / cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = layers::linear_frozen(store, &super::p("cross.wq"), h)?;
        let n_mem = self.keys.rows();
        let mut merged = vec![0.0; h.rows() * d];
        let mut w = vec![0.0; n_mem];
        for i in 0..h.rows() {
            let qi = q.row(i);
            for hd in 0..cfg.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                for (j, wj) in w.iter_mut().enumerate() {
                    let kj = &self.keys.row(j)[cols.clone()];
                    *wj = qi[cols.clone()].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    sum += *wj;
                }
                let out = &mut merged[i * d + hd * dh..i * d + (hd + 1) * dh];
                for (j, wj) in w.iter().enumerate() {
                    let vj = &self.values.row(j)[cols.clone()];
                    for (o, v) in out.iter_mut().zip(vj) {
                        *o += wj / sum * v;
                    }
                }
            }
        }
        let merged = Tensor::new(vec![h.rows(), d], merged)?;
        let r = layers::linear_frozen(store, &super::p("cross.wo"), &merged)?;
        let z_rows = match &self.z {
            Some(z) => {
                let row = z.data();
                let data: Vec<f64> = (0..h.rows()).flat_map(|_| row.iter().copied()).collect();
                Some(Tensor::new(vec![h.rows(), row.len()], data)?)
            }
            None => None,
        };
        let mut parts = vec![h, &r];
        parts.extend(z_rows.as_ref());
        let proj = layers::linear_frozen(store, &super::p("fuse"), &Tensor::concat_cols(&parts)?)?;
        let mut fused = h.clone();
        for (a, b) in fused.data_mut().iter_mut().zip(proj.data()) {
            *a += b;
        }
        nets::output_head_frozen(store, &fused)
    }
}

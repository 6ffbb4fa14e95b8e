//! Define-by-run computation record with a reverse sweep.
//!
//! Every forward call appends one node holding its output value and whatever
//! the reverse pass needs. Node ids are handed out in execution order, so the
//! record is topologically sorted by construction.

use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Gelu(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Rc<[usize]>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zeros when the node does not reach the loss.
    pub fn of(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reaches(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// The active computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_finite: bool) -> Var {
        debug_assert!(
            !inputs_finite || value.all_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn finite(&self, vars: &[Var]) -> bool {
        !cfg!(debug_assertions) || vars.iter().all(|v| self.nodes[v.0].value.all_finite())
    }

    /// A constant input. Gradients are still tracked so tests can inspect them.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// The named parameter of `store`. Repeated calls return the same node so
    /// gradient contributions accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.push(value, Op::Leaf, false);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(ta);
        let (k2, n) = as_matrix(tb);
        if k != k2 || tb.shape().len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(m, k, n, ta.data(), tb.data(), &mut out);
        let fin = self.finite(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), fin))
    }

    /// `a · bᵀ` without materializing the transpose on the record.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix(ta);
        let (n, k2) = as_matrix(tb);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt_acc(m, k, n, ta.data(), tb.data(), &mut out);
        let fin = self.finite(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), fin))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        let out = kernels::transpose(r, c, t.data());
        let fin = self.finite(&[x]);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), fin)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let fin = self.finite(&[a, b]);
        Ok(self.push(out, op, fin))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::add_into(row, tb.data());
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let fin = self.finite(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), fin))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let fin = self.finite(&[x]);
        self.push(out, op, fin)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&v| scale * v + shift).collect(),
        );
        let fin = self.finite(&[x]);
        self.push(out, Op::Affine(x, scale), fin)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None).expect("unmasked softmax cannot fail")
    }

    /// Softmax along the last axis where `allowed` (row-major, same shape as
    /// `x`) marks attendable entries. Disallowed entries get probability 0.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        if let Some(a) = allowed {
            if a.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![a.len()],
                });
            }
            for i in 0..r {
                if !a[i * c..(i + 1) * c].iter().any(|&b| b) {
                    return Err(Error::FullyMaskedRow(i));
                }
            }
        }
        let mut out = vec![0.0; t.numel()];
        for i in 0..r {
            kernels::softmax_row(
                &t.data()[i * c..(i + 1) * c],
                allowed.map(|a| &a[i * c..(i + 1) * c]),
                &mut out[i * c..(i + 1) * c],
            );
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let fin = self.finite(&[x]);
        Ok(self.push(out, Op::Softmax { x }, fin))
    }

    /// Row-wise layer normalization followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = as_matrix(tx);
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        let fin = self.finite(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            fin,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (p, v) = as_matrix(t);
        if targets.len() != p || mask.len() != p {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask("cross_entropy"));
        }
        let mut probs = vec![0.0; p * v];
        let mut total = 0.0;
        for i in 0..p {
            if !mask[i] {
                continue;
            }
            let row = &t.data()[i * v..(i + 1) * v];
            kernels::softmax_row(row, None, &mut probs[i * v..(i + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let fin = self.finite(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            fin,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let fin = self.finite(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), fin)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the listed rows; returns a `1 × c` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::EmptyMask("mean_rows"));
        }
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut out = vec![0.0; c];
        for &i in rows {
            kernels::add_into(&mut out, t.row(i));
        }
        let n = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let fin = self.finite(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![1, c], out),
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            fin,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup, broadcasting).
    pub fn gather_rows(&mut self, table: Var, ids: impl Into<Rc<[usize]>>) -> Result<Var> {
        let ids: Rc<[usize]> = ids.into();
        let t = self.value(table);
        let (r, c) = as_matrix(t);
        if let Some(&id) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::TokenOutOfRange { id, vocab: r });
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids.iter() {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), c], out);
        let fin = self.finite(&[table]);
        Ok(self.push(out, Op::GatherRows { table, ids }, fin))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, total], out);
        let fin = self.finite(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), fin))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![rows, c], out);
        let fin = self.finite(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), fin))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        if start + len > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = Tensor::from_parts(vec![len, c], t.data()[start * c..(start + len) * c].to_vec());
        let fin = self.finite(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, fin))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = as_matrix(t);
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], out);
        let fin = self.finite(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, fin))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let fin = self.finite(&[x]);
        Ok(self.push(out, Op::Reshape(x), fin))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Reverse sweep from `loss`, accumulating into the gradients of every
    /// parameter fetched through [`Tape::param`]. The record is consumed.
    pub fn backward(self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                store.accumulate_grad(name, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(val(*a));
                let n = val(*b).cols();
                kernels::gemm_nt_acc(m, n, k, g, val(*b).data(), acc!(*a));
                kernels::gemm_tn_acc(m, k, n, val(*a).data(), g, acc!(*b));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = as_matrix(val(*a));
                let n = val(*b).rows();
                kernels::gemm_acc(m, n, k, g, val(*b).data(), acc!(*a));
                kernels::gemm_tn_acc(m, n, k, g, val(*a).data(), acc!(*b));
            }
            Op::Transpose(x) => {
                let (r, c) = as_matrix(val(*x));
                let gt = kernels::transpose(c, r, g);
                kernels::add_into(acc!(*x), &gt);
            }
            Op::Add(a, b) => {
                kernels::add_into(acc!(*a), g);
                kernels::add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                kernels::add_into(acc!(*a), g);
                for (d, s) in acc!(*b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                for ((d, s), y) in acc!(*a).iter_mut().zip(g).zip(vb) {
                    *d += s * y;
                }
                for ((d, s), x) in acc!(*b).iter_mut().zip(g).zip(va) {
                    *d += s * x;
                }
            }
            Op::AddRow(x, bias) => {
                kernels::add_into(acc!(*x), g);
                let c = val(*bias).numel();
                let gb = acc!(*bias);
                for row in g.chunks(c) {
                    kernels::add_into(gb, row);
                }
            }
            Op::Affine(x, s) => {
                for (d, gv) in acc!(*x).iter_mut().zip(g) {
                    *d += s * gv;
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                for ((d, gv), yv) in acc!(*x).iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                for ((d, gv), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    *d += gv * kernels::gelu_grad(*xi);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x).data();
                for ((d, gv), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    if *xi > *lo && *xi < *hi {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                let dx = acc!(*x);
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gain_v = val(*gain).data();
                {
                    let gg = acc!(*gain);
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gv), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *d += gv * h;
                        }
                    }
                }
                {
                    let gb = acc!(*bias);
                    for gr in g.chunks(c) {
                        kernels::add_into(gb, gr);
                    }
                }
                let dx = acc!(*x);
                let inv_c = 1.0 / c as f64;
                for (i, ((gr, hr), dr)) in g
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gain_v[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh *= inv_c;
                    mean_dh_h *= inv_c;
                    for j in 0..c {
                        let dh = gr[j] * gain_v[j];
                        dr[j] += rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = val(*logits).cols();
                let scale = g[0] / *count as f64;
                let dl = acc!(*logits);
                for (i, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                acc!(*x).iter_mut().for_each(|d| *d += s);
            }
            Op::MeanRows { x, rows } => {
                let c = val(*x).cols();
                let n = rows.len() as f64;
                let dx = acc!(*x);
                for &i in rows {
                    for (d, gv) in dx[i * c..(i + 1) * c].iter_mut().zip(g) {
                        *d += gv / n;
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let c = val(*table).cols();
                let dt = acc!(*table);
                for (k, &i) in ids.iter().enumerate() {
                    kernels::add_into(&mut dt[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let dp = acc!(p);
                    for i in 0..r {
                        kernels::add_into(
                            &mut dp[i * w..(i + 1) * w],
                            &g[i * total + offset..i * total + offset + w],
                        );
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    kernels::add_into(acc!(p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                let dx = acc!(*x);
                kernels::add_into(&mut dx[start * c..start * c + g.len()], g);
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                let dx = acc!(*x);
                for (i, gr) in g.chunks(w).enumerate() {
                    kernels::add_into(&mut dx[i * c + start..i * c + start + w], gr);
                }
            }
            Op::Reshape(x) => kernels::add_into(acc!(*x), g),
        }
    }
}

//! Reverse-mode differentiation over dense f64 tensors.
//!
//! [`Tape`] records primitive ops as they execute; [`Tape::backward`] sweeps
//! them in reverse and accumulates parameter gradients into a
//! [`ParameterStore`]. [`finite_diff_grad`] is the central-difference oracle
//! every gradient test in the crate is checked against.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{adam_step, finite_diff_grad, relative_error, AdamConfig, Parameter, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Worst per-parameter relative error between the tape's gradient and central
/// differences for the scalar built by `build`.
///
/// `build` must be deterministic in the store it is given. Errors are
/// norm-wise per parameter with denominators floored at
/// `GRAD_CHECK_FLOOR · max(1, |loss|)`, so parameters with a structurally zero
/// gradient (e.g. attention key biases, which softmax ignores) are judged by
/// absolute difference against a bound that grows with the rounding noise.
pub fn check_gradients<F>(store: &ParameterStore, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let floor = GRAD_CHECK_FLOOR * tape.value(loss).item().abs().max(1.0);
    let mut analytic = store.clone();
    analytic.zero_grads();
    tape.backward(loss, &mut analytic)?;

    let numeric = finite_diff_grad(
        |s| {
            let mut t = Tape::new();
            let l = build(&mut t, s).expect("forward succeeded once");
            t.value(l).item()
        },
        store,
        h,
    );
    let mut worst = GradCheck::default();
    for (name, num) in &numeric {
        let ana = analytic.grad(name).expect("same names");
        let err = relative_error(ana, num, floor);
        if err >= worst.max_rel_err {
            worst = GradCheck {
                max_rel_err: err,
                worst_param: name.clone(),
            };
        }
    }
    Ok(worst)
}

/// Central differences at `h = 1e-5` carry about `1e-11 · |loss|` of rounding
/// noise per coordinate; the floor (per unit of loss) sits well above that.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let r = t.constant(m(&[&[1.0, 2.0]]));
        let z = t.constant(m(&[&[0.0], &[0.0]]));
        let p = t.matmul(r, z).unwrap();
        assert_eq!(t.value(p), &m(&[&[0.0]]));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::randn(&[3, 3], 1.0, &mut rng)).unwrap();
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let check = check_gradients(&s, 1e-5, |t, s| {
            let a = t.param(s, "a");
            let b = t.constant(b.clone());
            let p = t.matmul(a, b)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-6, "{check:?}");
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data()[0], 1.0);
        assert!(t.value(y).data()[1] < 1e-300);

        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.softmax(x);
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        for (k, v) in t.value(y).data().iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_softmax_rejects_empty_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            t.masked_softmax(x, &[true, false, false, false]),
            Err(Error::FullyMaskedRow(1))
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let g = t.constant(Tensor::ones(&[3]));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let x = t.constant(m(&[&[1.0, 5.0, -2.0], &[0.5, 0.25, 9.0]]));
        let g0 = t.constant(Tensor::zeros(&[3]));
        let bias = t.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let y = t.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(t.value(y).row(1), &[0.1, 0.2, 0.3]);

        let y = t.layer_norm(x, g, b, 1e-14).unwrap();
        for r in 0..2 {
            let row = t.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 3.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let l = t.constant(m(&[&[0.0, 0.0]]));
        let ce = t.cross_entropy(l, &[0], &[true]).unwrap();
        assert!((t.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let l = t.constant(m(&[&[1e6, 0.0, 0.0]]));
        let ce = t.cross_entropy(l, &[0], &[true]).unwrap();
        assert!(t.value(ce).item().abs() < 1e-12);

        assert!(matches!(
            t.cross_entropy(l, &[3], &[true]),
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 })
        ));
        assert!(matches!(t.cross_entropy(l, &[0], &[false]), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[4, 8], 2.0, &mut rng);
        let targets = [3usize, 0, 7, 5];
        let mask = [true, false, true, true];
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let ce = t.cross_entropy(l, &targets, &mask).unwrap();

        let mut total = 0.0;
        for i in [0usize, 2, 3] {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[targets[i]].exp() / z).ln();
        }
        assert!((t.value(ce).item() - total / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn backward_trivial_cases() {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        s.insert("q", Tensor::vector(vec![4.0])).unwrap();
        let mut t = Tape::new();
        let p = t.param(&s, "p");
        let _q = t.param(&s, "q");
        let loss = t.sum(p);
        t.backward(loss, &mut s).unwrap();
        assert_eq!(s.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.grad("q").unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut t = Tape::new();
        let p = t.param(&s, "p");
        assert!(matches!(t.backward(p, &mut s), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        s.insert("w", Tensor::randn(&[4, 4], 0.5, &mut rng)).unwrap();
        s.insert("g", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        s.insert("b", Tensor::randn(&[4], 1.0, &mut rng)).unwrap();
        let allowed = [true, false, true, true, true, true, false, true, false];
        let check = check_gradients(&s, 1e-5, |t, s| {
            let x = t.param(s, "x");
            let w = t.param(s, "w");
            let g = t.param(s, "g");
            let b = t.param(s, "b");
            let h = t.matmul(x, w)?;
            let h = t.add_row(h, b)?;
            let h = t.layer_norm(h, g, b, 1e-5)?;
            let h = t.gelu(h);
            let a = t.matmul_nt(h, x)?;
            let a = t.masked_softmax(a, &allowed)?;
            let o = t.matmul(a, x)?;
            let e = t.clamp(o, -0.8, 0.8);
            let e = t.exp(e);
            let xt = t.transpose(x);
            let xt = t.transpose(xt);
            let m2 = t.mul(e, xt)?;
            let d = t.sub(m2, h)?;
            let left = t.slice_cols(d, 0, 2)?;
            let right = t.slice_cols(d, 2, 2)?;
            let c = t.concat_cols(&[right, left])?;
            let top = t.slice_rows(c, 0, 1)?;
            let rows = t.concat_rows(&[c, top])?;
            let pooled = t.mean_rows(rows, &[0, 2, 3])?;
            let picked = t.gather_rows(rows, vec![3usize, 1, 1])?;
            let picked = t.reshape(picked, &[2, 6])?;
            let logits = t.affine(picked, 1.5, 0.2);
            let ce = t.cross_entropy(logits, &[4, 1], &[true, true])?;
            let s1 = t.sum(pooled);
            let s1 = t.scale(s1, 0.3);
            t.add(ce, s1)
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-6, "{check:?}");
    }
}

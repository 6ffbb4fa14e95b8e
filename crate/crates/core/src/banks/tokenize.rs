use crate::error::{Error, Result};

/// Bin index of one scalar under uniform binning of `[-1, 1]` into `vocab`
/// bins. Inputs are clipped first; `+1` lands in the last bin.
pub fn bin_index(a: f64, vocab: usize) -> usize {
    let a = if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) };
    let idx = ((a + 1.0) / 2.0 * vocab as f64).floor() as usize;
    idx.min(vocab - 1)
}

/// Center of bin `index`.
pub fn bin_center(index: usize, vocab: usize) -> f64 {
    -1.0 + (index as f64 + 0.5) * (2.0 / vocab as f64)
}

/// Row-major `(t, dof)` flattening of a `T×dof` trajectory into token ids.
pub fn tokenize_actions(actions: &[f64], vocab: usize) -> Result<Vec<usize>> {
    if vocab < 2 {
        return Err(Error::Config(format!("vocab_size {vocab} < 2")));
    }
    Ok(actions.iter().map(|&a| bin_index(a, vocab)).collect())
}

/// Bin centers for `tokens`, checked against the expected `T×dof` layout.
pub fn detokenize_actions(tokens: &[usize], vocab: usize, dof: usize, horizon: usize) -> Result<Vec<f64>> {
    if vocab < 2 {
        return Err(Error::Config(format!("vocab_size {vocab} < 2")));
    }
    if tokens.len() != dof * horizon {
        return Err(Error::ShapeMismatch {
            op: "detokenize_actions",
            lhs: vec![tokens.len()],
            rhs: vec![horizon, dof],
        });
    }
    tokens
        .iter()
        .map(|&id| {
            if id >= vocab {
                Err(Error::TokenOutOfRange { id, vocab })
            } else {
                Ok(bin_center(id, vocab))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundary_bins() {
        assert_eq!(tokenize_actions(&[-1.0, 1.0, 0.0], 32).unwrap(), vec![0, 31, 16]);
        assert_eq!(tokenize_actions(&[-7.0, 3.0], 32).unwrap(), vec![0, 31]);
    }

    #[test]
    fn worked_example() {
        // (0.37 + 1) / 2 * 32 = 21.92
        assert_eq!(bin_index(0.37, 32), 21);
        assert_eq!(bin_center(21, 32), 0.34375);
    }

    #[test]
    fn two_bin_centers() {
        assert_eq!(detokenize_actions(&[0, 1], 2, 1, 2).unwrap(), vec![-0.5, 0.5]);
    }

    #[test]
    fn out_of_range_id_rejected() {
        assert!(matches!(
            detokenize_actions(&[0, 32], 32, 2, 1),
            Err(Error::TokenOutOfRange { id: 32, vocab: 32 })
        ));
        assert!(detokenize_actions(&[0, 1, 2], 32, 2, 1).is_err());
    }

    #[test]
    fn round_trip_error_is_distance_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = 32;
        let a: Vec<f64> = (0..70).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = detokenize_actions(&tokenize_actions(&a, v).unwrap(), v, 7, 10).unwrap();
        let measured = a.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // Independent residual: offset of each scalar inside its bin.
        let width = 2.0 / v as f64;
        let residual = a
            .iter()
            .map(|x| {
                let pos = (x + 1.0) / width;
                ((pos - pos.floor()) - 0.5).abs() * width
            })
            .fold(0.0, f64::max);
        assert!((measured - residual).abs() < 1e-12);
    }

    #[test]
    fn round_trip_bound_over_many_scalars() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in [2usize, 7, 32, 256] {
            let a: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.5..1.5)).collect();
            let back = detokenize_actions(&tokenize_actions(&a, v).unwrap(), v, 1, a.len()).unwrap();
            for (x, y) in a.iter().zip(&back) {
                assert!((x.clamp(-1.0, 1.0) - y).abs() <= 1.0 / v as f64 + 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(a in -2.0f64..2.0, v in 2usize..512) {
            let id = bin_index(a, v);
            prop_assert!(id < v);
            let back = bin_center(id, v);
            prop_assert!((a.clamp(-1.0, 1.0) - back).abs() <= 1.0 / v as f64 + 1e-15);
        }

        #[test]
        fn binning_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, v in 2usize..128) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bin_index(lo, v) <= bin_index(hi, v));
        }
    }
}

//! Dense products (delegated to `matrixmultiply`, single-threaded, so the
//! summation order is fixed for a given build and CPU) and pointwise helpers.

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    strided(m, k, n, a, [k, 1], b, [n, 1], out);
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    strided(m, k, n, a, [k, 1], b, [1, k], out);
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    strided(k, m, n, a, [1, k], b, [n, 1], out);
}

/// `out (m×n, row-major) += A · B` for `A: m×k`, `B: k×n` given by
/// `[row stride, column stride]`.
#[allow(clippy::too_many_arguments)]
fn strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: [usize; 2],
    b: &[f64],
    sb: [usize; 2],
    out: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can form.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa[0] as isize,
            sa[1] as isize,
            b.as_ptr(),
            sb[0] as isize,
            sb[1] as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable softmax of one row, skipping masked-out entries
/// (`allowed[j] == false` gets probability exactly zero).
pub(crate) fn softmax_row(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.map_or(true, |a| a[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        if ok(j) {
            *o = (v - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn gemm_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(m, k, n) in &[(1, 1, 1), (3, 7, 5), (17, 64, 33), (70, 9, 130)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = naive(m, k, n, &a, &b);
            let mut got = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut got);
            let mut nt = vec![0.0; m * n];
            gemm_nt_acc(m, k, n, &a, &transpose(k, n, &b), &mut nt);
            let mut tn = vec![0.0; m * n];
            gemm_tn_acc(k, m, n, &transpose(m, k, &a), &b, &mut tn);
            for ((w, g), (x, y)) in want.iter().zip(&got).zip(nt.iter().zip(&tn)) {
                assert!((w - g).abs() < 1e-12 && (w - x).abs() < 1e-12 && (w - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut ab = vec![0.0; 4];
        gemm_acc(2, 3, 2, &a, &b, &mut ab);
        assert_eq!(ab, vec![0.5, 7.0, 2.0, 16.0]);

        let bt = transpose(3, 2, &b);
        let mut ab2 = vec![0.0; 4];
        gemm_nt_acc(2, 3, 2, &a, &bt, &mut ab2);
        assert_eq!(ab, ab2);

        let at = transpose(2, 3, &a);
        let mut ab3 = vec![0.0; 4];
        gemm_tn_acc(3, 2, 2, &at, &b, &mut ab3);
        assert_eq!(ab, ab3);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

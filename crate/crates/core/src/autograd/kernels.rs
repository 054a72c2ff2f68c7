//! Dense matrix kernels. All of them accumulate into `out` and iterate in a
//! fixed order, so results are bitwise reproducible on a given platform.

use super::Real;

/// Dot product with eight independent partial sums, reduced pairwise.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in tail_a.iter().zip(tail_b) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), out, (n as isize, 1));
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_bt_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), out, (n as isize, 1));
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_at_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm_acc(k, m, n, a, (1, k as isize), b, (n as isize, 1), out, (n as isize, 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let (m, k, n) = (3, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        matmul_into(&a, &b, m, k, n, &mut got);
        let mut got_bt = vec![0.0; m * n];
        matmul_bt_into(&a, &transpose(&b, k, n), m, k, n, &mut got_bt);
        let mut got_at = vec![0.0; m * n];
        matmul_at_into(&transpose(&a, m, k), &b, k, m, n, &mut got_at);

        for i in 0..m * n {
            assert!((got[i] - want[i]).abs() < 1e-12);
            assert!((got_bt[i] - want[i]).abs() < 1e-12);
            assert!((got_at[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        for len in [0, 1, 7, 8, 9, 17] {
            let a: Vec<f64> = (0..len).map(|i| i as f64).collect();
            let want: f64 = a.iter().map(|x| x * x).sum();
            assert_eq!(dot(&a, &a), want);
        }
    }
}

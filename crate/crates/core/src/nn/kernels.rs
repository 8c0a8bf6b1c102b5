//! Row-major matrix kernels. Summation order is fixed, so results are
//! bitwise reproducible.

use crate::tensor::Real;

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            axpy(s, &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == T::zero() {
                continue;
            }
            axpy(s, brow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

#[inline]
fn axpy<T: Real>(s: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Dot product with eight interleaved partial sums.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..c * 8 + 8];
        let ys = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
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
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64 - 6.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64 - 5.0) / 4.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut out, m, k, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut out, m, k, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut out = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut out, k, m, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

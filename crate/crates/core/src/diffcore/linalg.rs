//! Shared dense kernels for the tape's forward and backward passes.

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn gemm<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// out[m,k] += a[m,n] @ b[k,n]^T
pub fn gemm_nt<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = E::ZERO;
            for j in 0..n {
                s += a_row[j] * b_row[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T @ b[m,n]
pub fn gemm_tn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialized axis permutation of a row-major buffer.
/// `out.shape[i] = shape[axes[i]]`.
pub fn permute_raw<E: Copy>(shape: &[usize], data: &[E], axes: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mut out = Vec::with_capacity(data.len());
    let mut out_multi = vec![0usize; rank];
    for _ in 0..data.len() {
        let mut in_off = 0usize;
        for d in 0..rank {
            in_off += out_multi[d] * in_strides[axes[d]];
        }
        out.push(data[in_off]);
        for d in (0..rank).rev() {
            out_multi[d] += 1;
            if out_multi[d] < out_shape[d] {
                break;
            }
            out_multi[d] = 0;
        }
    }
    (out_shape, out)
}

//! Raw slice kernels shared by forward and backward rules.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Below this many multiply-adds a matmul runs on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 16;

/// `c[b] = a[b] · b[b]` for `batch` independent `[m, k] x [k, n]` products.
///
/// Every output row is produced by one thread in a fixed summation order,
/// so results are bitwise identical regardless of the thread count.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    let mut c = vec![T::zero(); batch * m * n];
    let row = |(r, c_row): (usize, &mut [T])| {
        let bi = r / m;
        let a_row = &a[r * k..(r + 1) * k];
        let b_mat = &b[bi * k * n..(bi + 1) * k * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b_mat[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    };
    if batch * m * k * n >= PAR_MATMUL_WORK && batch * m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// Swap the last two axes of a batch of `[m, n]` matrices.
pub(crate) fn transpose_last2<T: Scalar>(a: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for bi in 0..batch {
        let src = &a[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

pub(crate) fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(TensorError::InvalidArgument {
            op: "permute",
            reason: format!("axes {axes:?} do not match rank of {shape:?}"),
        });
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("axes {axes:?} are not a permutation"),
            });
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return (out_shape, data.to_vec());
    }
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut base = 0usize;
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_stride;
        }
        // advance the outer multi-index (axes 0..last)
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

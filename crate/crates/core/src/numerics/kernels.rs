//! Dense row-major kernels shared by the tape ops.
//!
//! Every output element is reduced in a fixed order, so parallel and serial
//! execution produce bit-identical results.

use rayon::prelude::*;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;
/// Output rows handed to one parallel task.
const ROW_BLOCK: usize = 32;

/// `out[m×n] = op(a) · op(b)` with operands described by row/column strides.
/// Parallel tasks own disjoint row blocks of `out`; each element's reduction
/// over `k` is the same sequence regardless of blocking, so results do not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let block = |(bi, out_rows): (usize, &mut [f64])| {
        let rows = out_rows.len() / n;
        let a_off = bi * ROW_BLOCK * rsa;
        // SAFETY: the kernel reads `rows×k` elements of `a` starting at
        // `a_off` with strides (rsa, csa), all of `b`, and writes the
        // `rows×n` block `out_rows`; the slices cover these ranges.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
    out
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    gemm_strided(a, k, 1, b, n, 1, m, k, n)
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() >= m * k && b.len() >= n * k);
    gemm_strided(a, k, 1, b, 1, k, m, k, n)
}

/// `out[k×n] = a[m×k]ᵀ · c[m×n]`
pub fn gemm_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert!(a.len() >= m * k && c.len() >= m * n);
    gemm_strided(a, 1, k, c, n, 1, k, m, n)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Adds `src` into `dst` element-wise.
pub fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

//! Matrix-multiply kernels backing the tape's `matmul`/`dense` ops.
//!
//! All three variants (NN, NT, TN) are expressed as strided `dgemm` calls.
//! With the `parallel` feature the NN/NT cases split output rows across
//! rayon workers; each output element is still accumulated in the same
//! k-order as the sequential call, so parallel and sequential results are
//! bit-identical.

use matrixmultiply::dgemm;

/// Work threshold (multiply-adds) below which splitting is not worth it.
const PAR_THRESHOLD: usize = 32 * 1024;

/// c = a @ b (+ c if `accumulate`), a: (m,k), b: (k,n), c: (m,n).
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    row_split(m, k, n, a, k, c, |rows, a_chunk, c_chunk| unsafe {
        dgemm(
            rows,
            k,
            n,
            1.0,
            a_chunk.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c_chunk.as_mut_ptr(),
            n as isize,
            1,
        );
    });
}

/// c = a @ b^T (+ c), a: (m,k), b: (n,k), c: (m,n).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    row_split(m, k, n, a, k, c, |rows, a_chunk, c_chunk| unsafe {
        dgemm(
            rows,
            k,
            n,
            1.0,
            a_chunk.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c_chunk.as_mut_ptr(),
            n as isize,
            1,
        );
    });
}

/// c = a^T @ b (+ c), a: (k,m), b: (k,n), c: (m,n).
///
/// Row-splitting c would need strided views into `a`, so this variant always
/// runs as a single call; it only appears in weight-gradient accumulation
/// where m and n are layer widths.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits the m output rows of `c` (and the matching rows of `a`) into
/// per-thread chunks and runs `call` on each.
#[cfg(feature = "parallel")]
fn row_split<F>(m: usize, k: usize, n: usize, a: &[f64], a_row: usize, c: &mut [f64], call: F)
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    let threads = rayon::current_num_threads();
    if threads < 2 || m < 2 || m * k * n < PAR_THRESHOLD {
        call(m, a, c);
        return;
    }
    let chunk_rows = m.div_ceil(threads);
    c.par_chunks_mut(chunk_rows * n)
        .zip(a.par_chunks(chunk_rows * a_row))
        .for_each(|(c_chunk, a_chunk)| {
            call(c_chunk.len() / n, a_chunk, c_chunk);
        });
}

#[cfg(not(feature = "parallel"))]
fn row_split<F>(m: usize, _k: usize, _n: usize, a: &[f64], _a_row: usize, c: &mut [f64], call: F)
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    call(m, a, c);
}

/// Reference triple-loop multiply, kept as an independent check on the
/// dgemm-backed kernels.
#[cfg(test)]
pub fn matmul_naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

//! Dense matrix products over row-major slices.
//!
//! Rows of the output are split into fixed-size blocks that are processed in
//! parallel. The block size never depends on the thread count, so every output
//! element is reduced in the same order regardless of scheduling.

use rayon::prelude::*;

use crate::scalar::Scalar;

const ROW_BLOCK: usize = 32;

/// Matrix operand: row-major storage, optionally used transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape after transposition.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Strides `(row, col)` of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(out.len(), m * n, "output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    out.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let r0 = blk * ROW_BLOCK;
            let rows = chunk.len() / n;
            let a_off = r0 as isize * rsa;
            // SAFETY: `a_off` addresses row `r0` of the logical matrix, which
            // has at least `rows` further rows; `chunk` is exclusively owned.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    T::one(),
                    a.data.as_ptr().offset(a_off),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matches_naive_product_in_all_transpositions() {
        let (m, k, n) = (70, 13, 9);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 97) as f64) / 40.0 - 1.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(&a, m, k), MatRef::new(&b, k, n), &mut out, false);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut out2 = vec![1.0; m * n];
        gemm(MatRef::new(&at, k, m).t(), MatRef::new(&bt, n, k).t(), &mut out2, true);
        for (x, y) in out2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }
}

//! Row-major GEMM kernels. All accumulate into `c`.

use rayon::prelude::*;

use super::Real;

// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 17;

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let row = |(i, c_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        accumulate_rows(c_row, n, (0..k).map(|p| (a_row[p], p)), b);
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// c[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n == 0 || m == 0 {
        return;
    }
    let row = |(p, c_row): (usize, &mut [T])| {
        accumulate_rows(c_row, n, (0..m).map(|i| (a[i * k + p], i)), b);
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c_row += Σ coef · b[row]` over `(coef, row)` pairs, four rows per pass so
/// each `c` element is loaded and stored once per four multiply-adds.
#[inline]
fn accumulate_rows<T: Real>(c_row: &mut [T], n: usize, terms: impl Iterator<Item = (T, usize)>, b: &[T]) {
    let row = |r: usize| &b[r * n..(r + 1) * n];
    let mut pending: [(T, usize); 4] = [(T::zero(), 0); 4];
    let mut len = 0;
    for (coef, r) in terms {
        if coef == T::zero() {
            continue;
        }
        pending[len] = (coef, r);
        len += 1;
        if len == 4 {
            let [(a0, r0), (a1, r1), (a2, r2), (a3, r3)] = pending;
            let rows = row(r0).iter().zip(row(r1)).zip(row(r2)).zip(row(r3));
            for (cv, (((&b0, &b1), &b2), &b3)) in c_row.iter_mut().zip(rows) {
                *cv += a0 * b0 + a1 * b1 + a2 * b2 + a3 * b3;
            }
            len = 0;
        }
    }
    for &(coef, r) in &pending[..len] {
        for (cv, &bv) in c_row.iter_mut().zip(row(r)) {
            *cv += coef * bv;
        }
    }
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(k, m, n, &at, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

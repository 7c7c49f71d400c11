//! Small dense f64 kernels over row-major square matrices.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`, no pivoting.
///
/// Fails with the index of the first non-positive pivot.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let row_j = &l[j * n..j * n + j];
        let d = a[j * n + j] - row_j.iter().map(|x| x * x).sum::<f64>();
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            l[i * n + j] = (a[i * n + j] - s) / ljj;
        }
    }
    Ok(l)
}

/// Inverse of `A = L Lᵀ` given its Cholesky factor, symmetrized.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    // Linv row by row: row_i = (e_i - sum_{k<i} L_ik row_k) / L_ii
    let mut linv = vec![0.0; n * n];
    for i in 0..n {
        let (done, rest) = linv.split_at_mut(i * n);
        let row = &mut rest[..n];
        row[i] = 1.0;
        for k in 0..i {
            let lik = l[i * n + k];
            if lik != 0.0 {
                let row_k = &done[k * n..k * n + k + 1];
                for (r, x) in row.iter_mut().zip(row_k) {
                    *r -= lik * x;
                }
            }
        }
        let d = l[i * n + i];
        row[..=i].iter_mut().for_each(|r| *r /= d);
    }
    // A⁻¹ = Linvᵀ Linv as a sum of outer products of Linv rows (lower triangle)
    let mut inv = vec![0.0; n * n];
    for k in 0..n {
        let row = &linv[k * n..k * n + k + 1];
        for i in 0..=k {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for (acc, x) in inv[i * n..i * n + i + 1].iter_mut().zip(row) {
                *acc += ri * x;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            inv[j * n + i] = inv[i * n + j];
        }
    }
    inv
}

pub fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

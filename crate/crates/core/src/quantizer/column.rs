//! Per-column primitives: reshaping a column into vectors, nearest-centroid
//! quantization of one column, its closed-form loss and the error feedback
//! into the remaining columns.

use rayon::prelude::*;

use crate::codebook::{Codebook, VectorSet};
use crate::error::{Error, Result};
use crate::hessian::HessianData;
use crate::tensor::TensorF32;

/// Work (rows × columns touched) above which propagation runs on the rayon pool.
const PARALLEL_PROPAGATE_WORK: usize = 1 << 18;

/// Column-major f64 copy of a weight matrix that the main pass edits in place.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WorkMatrix {
    pub fn from_tensor(w: &TensorF32) -> Result<Self> {
        let (rows, cols) = w.dims2()?;
        let mut data = vec![0.0; rows * cols];
        for (r, row) in w.data().chunks_exact(cols).enumerate() {
            for (c, &x) in row.iter().enumerate() {
                data[c * rows + r] = x as f64;
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, q: usize) -> &[f64] {
        &self.data[q * self.rows..(q + 1) * self.rows]
    }

    pub fn column_mut(&mut self, q: usize) -> &mut [f64] {
        &mut self.data[q * self.rows..(q + 1) * self.rows]
    }

    /// Row-major copy, rounded to f32.
    pub fn to_tensor(&self) -> Result<TensorF32> {
        let mut out = vec![0.0f32; self.rows * self.cols];
        for c in 0..self.cols {
            for (r, &x) in self.column(c).iter().enumerate() {
                out[r * self.cols + c] = x as f32;
            }
        }
        TensorF32::matrix(self.rows, self.cols, out)
    }
}

/// Cuts a column into `⌈M/v⌉` contiguous vectors, zero-padding the last one.
/// Returns the vectors and the number of padding entries.
pub fn reshape_column(column: &[f32], v: usize) -> (VectorSet, usize) {
    assert!(v > 0 && !column.is_empty());
    let count = column.len().div_ceil(v);
    let pad = count * v - column.len();
    let mut data = Vec::with_capacity(count * v);
    data.extend_from_slice(column);
    data.resize(count * v, 0.0);
    (VectorSet::new(v, data).expect("length is a multiple of v"), pad)
}

/// Inverse of [`reshape_column`]: concatenates and strips the padding.
pub fn unreshape_column(vectors: &VectorSet, rows: usize) -> Vec<f32> {
    let mut out = vectors.data().to_vec();
    out.truncate(rows);
    out
}

/// Reconstruction and indices for one column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnCode {
    /// Quantized column, padding stripped.
    pub q_hat: Vec<f32>,
    pub main_idx: Vec<u32>,
    pub residual_idx: Option<Vec<u32>>,
}

/// Maps every vector of column `q` of `work` to its nearest centroid, then
/// (optionally) the leftover of each vector to its nearest residual centroid.
///
/// `H⁻¹_qq` is the same for every vector of a column, so the per-column loss is
/// minimized by plain Euclidean nearest-centroid search.
pub fn quantize_column(
    work: &WorkMatrix,
    q: usize,
    cb: &Codebook,
    residual_cb: Option<&Codebook>,
) -> Result<ColumnCode> {
    if q >= work.cols() {
        return Err(Error::shape(format!("column {q} of {}", work.cols())));
    }
    if let Some(r) = residual_cb {
        if r.vector_len() != cb.vector_len() {
            return Err(Error::shape("residual codebook vector length differs"));
        }
    }
    let v = cb.vector_len();
    let rows = work.rows();
    let column = work.column(q);
    let count = rows.div_ceil(v);
    let mut padded = vec![0.0f64; v];
    let mut q_hat = Vec::with_capacity(count * v);
    let mut main_idx = Vec::with_capacity(count);
    let mut residual_idx = residual_cb.map(|_| Vec::with_capacity(count));

    for i in 0..count {
        let chunk = &column[i * v..((i + 1) * v).min(rows)];
        padded[..chunk.len()].copy_from_slice(chunk);
        padded[chunk.len()..].iter_mut().for_each(|x| *x = 0.0);

        let (idx, _) = cb.nearest(&padded);
        main_idx.push(idx as u32);
        let centroid = cb.centroid(idx);
        match (residual_cb, residual_idx.as_mut()) {
            (Some(rcb), Some(ridx)) => {
                let leftover: Vec<f64> = padded
                    .iter()
                    .zip(centroid)
                    .map(|(x, &c)| x - c as f64)
                    .collect();
                let (r, _) = rcb.nearest(&leftover);
                ridx.push(r as u32);
                q_hat.extend(centroid.iter().zip(rcb.centroid(r)).map(|(a, b)| a + b));
            }
            _ => q_hat.extend_from_slice(centroid),
        }
    }
    q_hat.truncate(rows);
    Ok(ColumnCode {
        q_hat,
        main_idx,
        residual_idx,
    })
}

/// Closed-form loss of quantizing one column, `‖q̂ − q‖² / (2·H⁻¹_qq)`.
pub fn delta_l<A, B>(q_hat: &[A], q_orig: &[B], hinv_qq: f64) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if q_hat.len() != q_orig.len() {
        return Err(Error::shape(format!(
            "columns of length {} and {}",
            q_hat.len(),
            q_orig.len()
        )));
    }
    if !hinv_qq.is_finite() || hinv_qq <= 0.0 {
        return Err(Error::InvalidHessian(format!("H⁻¹_qq = {hinv_qq} is not positive")));
    }
    let sq: f64 = q_hat
        .iter()
        .zip(q_orig)
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum();
    Ok(sq / (2.0 * hinv_qq))
}

/// Writes `q_hat` into column `q` and compensates every unquantized column
/// `j` with `e · H⁻¹_{q,j} / H⁻¹_{q,q}`, where `e = q_hat − work[:, q]`.
///
/// Uses the full inverse Hessian; this is the exact Lagrangian update when
/// every other column is still free.
pub fn propagate_error(
    work: &mut WorkMatrix,
    q: usize,
    q_hat: &[f32],
    hd: &HessianData,
    unquantized: &[bool],
) -> Result<()> {
    if hd.dim() != work.cols() || unquantized.len() != work.cols() {
        return Err(Error::shape(format!(
            "hessian dim {}, mask {}, matrix has {} columns",
            hd.dim(),
            unquantized.len(),
            work.cols()
        )));
    }
    let row = hd.hinv_row(q);
    let pivot = row[q];
    apply_feedback(work, q, q_hat, |j| row[j] / pivot, unquantized)
}

/// Sets column `q` to `q_hat` and adds `e · coeff(j)` to every column flagged
/// in `targets` (column `q` itself is never a target).
pub(crate) fn apply_feedback(
    work: &mut WorkMatrix,
    q: usize,
    q_hat: &[f32],
    coeff: impl Fn(usize) -> f64 + Sync,
    targets: &[bool],
) -> Result<()> {
    let rows = work.rows();
    if q_hat.len() != rows {
        return Err(Error::shape(format!(
            "quantized column has {} rows, matrix has {rows}",
            q_hat.len()
        )));
    }
    let err: Vec<f64> = q_hat
        .iter()
        .zip(work.column(q))
        .map(|(&h, &w)| h as f64 - w)
        .collect();
    for (dst, &h) in work.column_mut(q).iter_mut().zip(q_hat) {
        *dst = h as f64;
    }
    let update = |(j, col): (usize, &mut [f64])| {
        if j == q || !targets[j] {
            return;
        }
        let c = coeff(j);
        if c == 0.0 {
            return;
        }
        for (x, e) in col.iter_mut().zip(&err) {
            *x += e * c;
        }
    };
    let active = targets.iter().filter(|&&t| t).count();
    if rows * active >= PARALLEL_PROPAGATE_WORK {
        work.data.par_chunks_mut(rows).enumerate().for_each(update);
    } else {
        work.data.chunks_mut(rows).enumerate().for_each(update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodebookRole;

    fn book(v: usize, data: Vec<f32>) -> Codebook {
        Codebook::new(v, data, CodebookRole::Main, 0).unwrap()
    }

    fn single_column(values: Vec<f32>) -> WorkMatrix {
        let n = values.len();
        WorkMatrix::from_tensor(&TensorF32::matrix(n, 1, values).unwrap()).unwrap()
    }

    #[test]
    fn reshape_even_and_padded() {
        let (vs, pad) = reshape_column(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(pad, 0);
        assert_eq!(vs.iter().collect::<Vec<_>>(), vec![&[1.0, 2.0][..], &[3.0, 4.0][..]]);
        let (vs, pad) = reshape_column(&[1.0, 2.0, 3.0, 4.0, 5.0], 2);
        assert_eq!(pad, 1);
        assert_eq!(vs.get(2), &[5.0, 0.0]);
    }

    #[test]
    fn quantize_exact_column() {
        let work = single_column(vec![1.0, 2.0, 3.0, 4.0]);
        let cb = book(2, vec![3.0, 4.0, 1.0, 2.0]);
        let code = quantize_column(&work, 0, &cb, None).unwrap();
        assert_eq!(code.q_hat, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(code.main_idx, vec![1, 0]);
        assert_eq!(delta_l(&code.q_hat, work.column(0), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn single_centroid_and_residual_completion() {
        let work = single_column(vec![3.0, 4.0]);
        let zero = book(2, vec![0.0, 0.0]);
        let code = quantize_column(&work, 0, &zero, None).unwrap();
        assert_eq!(code.q_hat, vec![0.0, 0.0]);
        let err2: f64 = code.q_hat.iter().zip(work.column(0)).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
        assert_eq!(err2, 25.0);

        let res = Codebook::new(2, vec![0.0, 0.0, 3.0, 4.0], CodebookRole::Residual, 0).unwrap();
        let code = quantize_column(&work, 0, &zero, Some(&res)).unwrap();
        assert_eq!(code.q_hat, vec![3.0, 4.0]);
        assert_eq!(code.residual_idx, Some(vec![1]));
    }

    #[test]
    fn padded_column_is_stripped() {
        let work = single_column(vec![1.0, 2.0, 3.0]);
        let cb = book(2, vec![1.0, 2.0, 3.0, 0.0]);
        let code = quantize_column(&work, 0, &cb, None).unwrap();
        assert_eq!(code.q_hat, vec![1.0, 2.0, 3.0]);
        assert_eq!(code.main_idx, vec![0, 1]);
    }

    #[test]
    fn delta_l_arithmetic() {
        assert_eq!(delta_l(&[1.0f32, 1.0], &[0.0f64, 0.0], 0.5).unwrap(), 2.0);
        assert_eq!(delta_l(&[2.0f32], &[2.0f64], 0.5).unwrap(), 0.0);
        assert!(matches!(delta_l(&[1.0f32], &[0.0f64], 0.0), Err(Error::InvalidHessian(_))));
        assert!(matches!(delta_l(&[1.0f32], &[0.0f64, 1.0], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn identity_hessian_leaves_other_columns() {
        let w = TensorF32::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut work = WorkMatrix::from_tensor(&w).unwrap();
        let before = work.clone();
        let hd = HessianData::identity(3);
        propagate_error(&mut work, 1, &[0.0, 0.0], &hd, &[true, false, true]).unwrap();
        assert_eq!(work.column(0), before.column(0));
        assert_eq!(work.column(2), before.column(2));
        assert_eq!(work.column(1), &[0.0, 0.0]);
    }

    #[test]
    fn quantized_columns_are_never_touched() {
        let h = vec![2.0, 0.5, 0.3, 0.5, 2.0, 0.4, 0.3, 0.4, 2.0];
        let hd = HessianData::from_matrix(h, 3).unwrap();
        let w = TensorF32::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let mut work = WorkMatrix::from_tensor(&w).unwrap();
        propagate_error(&mut work, 1, &[0.0], &hd, &[false, false, true]).unwrap();
        assert_eq!(work.column(0), &[1.0]);
        assert_eq!(work.column(1), &[0.0]);
        assert_ne!(work.column(2), &[3.0]);
    }
}

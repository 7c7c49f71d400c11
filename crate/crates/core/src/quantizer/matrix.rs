//! Whole-matrix quantization: outlier selection, grouping, codebook
//! initialization, the column-by-column main pass with error feedback, the
//! residual stage, and dequantization.

use serde::{Deserialize, Serialize};

use super::column::{apply_feedback, delta_l, quantize_column, reshape_column, WorkMatrix};
use super::config::{ColumnOrder, Propagation, QuantConfig};
use super::metrics::{proxy_loss, reconstruction_error, QuantStats};
use crate::codebook::{
    train_codebook, train_residual_codebook, Codebook, CodebookRole, TrainedCodebook, VectorSet,
};
use crate::error::{Error, Result};
use crate::hessian::HessianData;
use crate::linalg;
use crate::tensor::TensorF32;

/// A contiguous column range owned by one main codebook. Outlier columns
/// inside the range are not members of the band.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBand {
    pub col_start: usize,
    pub col_end: usize,
    pub main_codebook: usize,
    pub residual_codebook: Option<usize>,
}

/// Zero rows appended to each column before it is cut into vectors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub main: usize,
    pub residual: usize,
    pub outlier: usize,
}

/// Compressed form of one `M×N` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub config: QuantConfig,
    pub padding: Padding,
    /// Sorted ascending.
    pub outlier_cols: Vec<usize>,
    pub bands: Vec<GroupBand>,
    pub outlier_codebook: Option<usize>,
    pub codebooks: Vec<Codebook>,
    /// One entry per non-outlier column, ascending column order.
    pub main_indices: Vec<Vec<u32>>,
    /// Same layout as `main_indices`; empty when the residual stage is off.
    pub residual_indices: Vec<Vec<u32>>,
    /// One entry per outlier column, in `outlier_cols` order.
    pub outlier_indices: Vec<Vec<u32>>,
    pub stats: QuantStats,
}

impl QuantizedMatrix {
    /// Non-outlier columns, ascending.
    pub fn main_columns(&self) -> Vec<usize> {
        main_columns(self.cols, &self.outlier_cols)
    }

    /// Member columns of band `b`.
    pub fn band_columns(&self, b: usize) -> Vec<usize> {
        let band = &self.bands[b];
        (band.col_start..band.col_end)
            .filter(|c| self.outlier_cols.binary_search(c).is_err())
            .collect()
    }

    /// Checks that outliers and bands partition `0..cols` and that every index
    /// list has the right length and stays inside its codebook.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorruptContainer(m));
        if self.rows == 0 || self.cols == 0 {
            return bad("empty matrix".into());
        }
        if self.outlier_cols.windows(2).any(|p| p[0] >= p[1])
            || self.outlier_cols.last().is_some_and(|&c| c >= self.cols)
        {
            return bad("outlier columns are not sorted and in range".into());
        }
        let main_cols = self.main_columns();
        let mut next = 0;
        let mut covered = 0;
        for (b, band) in self.bands.iter().enumerate() {
            if band.col_start != next || band.col_end <= band.col_start || band.col_end > self.cols {
                return bad(format!("band {b} does not continue the partition"));
            }
            next = band.col_end;
            covered += self.band_columns(b).len();
            let main = self.codebook(band.main_codebook)?;
            if main.role() != CodebookRole::Main || main.vector_len() != self.config.v1 {
                return bad(format!("band {b} main codebook mismatch"));
            }
            if let Some(r) = band.residual_codebook {
                let r = self.codebook(r)?;
                if r.role() != CodebookRole::Residual || r.vector_len() != self.config.v1 {
                    return bad(format!("band {b} residual codebook mismatch"));
                }
            }
        }
        if !main_cols.is_empty() && next != self.cols {
            return bad("bands do not reach the last column".into());
        }
        if covered != main_cols.len() {
            return bad("bands do not cover the non-outlier columns".into());
        }
        if self.main_indices.len() != main_cols.len() {
            return bad("main index count differs from column count".into());
        }
        let residual = self.bands.iter().any(|b| b.residual_codebook.is_some());
        if residual && self.residual_indices.len() != main_cols.len() {
            return bad("residual index count differs from column count".into());
        }
        if self.outlier_indices.len() != self.outlier_cols.len() {
            return bad("outlier index count differs".into());
        }
        if !self.outlier_cols.is_empty() {
            let cb = self.codebook(self.outlier_codebook.ok_or_else(|| {
                Error::CorruptContainer("outlier columns without a codebook".into())
            })?)?;
            if cb.role() != CodebookRole::Outlier {
                return bad("outlier codebook has the wrong role".into());
            }
        }
        Ok(())
    }

    fn codebook(&self, i: usize) -> Result<&Codebook> {
        self.codebooks
            .get(i)
            .ok_or_else(|| Error::CorruptContainer(format!("codebook {i} missing")))
    }
}

pub(crate) fn main_columns(cols: usize, outliers: &[usize]) -> Vec<usize> {
    (0..cols).filter(|c| outliers.binary_search(c).is_err()).collect()
}

/// The `⌊percent·N/100⌋` columns with the largest `H_qq·‖W_:,q‖²`, sorted
/// ascending. Ties prefer the lower column index.
pub fn select_outlier_columns(w: &TensorF32, hd: &HessianData, percent: f64) -> Result<Vec<usize>> {
    let (rows, cols) = w.dims2()?;
    if hd.dim() != cols {
        return Err(Error::shape(format!("hessian dim {} vs {cols} columns", hd.dim())));
    }
    let count = super::config::outlier_count(percent, cols);
    let mut norms = vec![0.0f64; cols];
    for r in 0..rows {
        for (c, n) in norms.iter_mut().enumerate() {
            let x = w.at(r, c) as f64;
            *n += x * x;
        }
    }
    let mut scored: Vec<(f64, usize)> = norms
        .iter()
        .enumerate()
        .map(|(q, n)| (hd.h_diag(q) * n, q))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored.into_iter().take(count).map(|(_, q)| q).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Splits `members` into `groups` contiguous chunks; the last one takes the remainder.
fn split_bands(members: &[usize], groups: usize, cols: usize) -> Vec<(usize, usize, Vec<usize>)> {
    let base = members.len() / groups;
    let chunks: Vec<&[usize]> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { members.len() } else { (g + 1) * base };
            &members[g * base..end]
        })
        .collect();
    chunks
        .iter()
        .enumerate()
        .map(|(g, chunk)| {
            let start = if g == 0 { 0 } else { chunk[0] };
            let end = if g + 1 == groups { cols } else { chunks[g + 1][0] };
            (start, end, chunk.to_vec())
        })
        .collect()
}

fn visiting_order(cols: &[usize], order: ColumnOrder, hd: &HessianData) -> Vec<usize> {
    let mut out = cols.to_vec();
    if order == ColumnOrder::DescendingHessianDiag {
        out.sort_by(|&a, &b| hd.h_diag(b).total_cmp(&hd.h_diag(a)).then(a.cmp(&b)));
    }
    out
}

fn column_vectors(w: &TensorF32, cols: &[usize], v: usize) -> (VectorSet, Vec<usize>, usize) {
    column_vectors_with(cols, v, |q| w.column(q))
}

fn column_vectors_with(
    cols: &[usize],
    v: usize,
    column: impl Fn(usize) -> Vec<f32>,
) -> (VectorSet, Vec<usize>, usize) {
    let mut set = VectorSet::with_capacity(v, 0);
    let mut pad = 0;
    let mut owners = Vec::new();
    for &q in cols {
        let (vs, p) = reshape_column(&column(q), v);
        owners.extend(std::iter::repeat_n(q, vs.len()));
        set.extend(&vs);
        pad = p;
    }
    (set, owners, pad)
}

/// Each vector is weighted by `H_qq` of the column it came from.
fn hessian_weights(owners: &[usize], hd: &HessianData) -> Vec<f64> {
    owners.iter().map(|&q| hd.h_diag(q)).collect()
}

fn train_stage(
    vectors: &VectorSet,
    weights: &[f64],
    k: usize,
    cfg: &QuantConfig,
    role: CodebookRole,
    group: u32,
) -> Result<Codebook> {
    let opts = cfg.stage_options(role, group);
    let TrainedCodebook { codebook, .. } = match role {
        CodebookRole::Residual => train_residual_codebook(vectors, weights, k, &opts)?,
        _ => train_codebook(vectors, weights, k, &opts)?,
    };
    Codebook::new(codebook.vector_len(), codebook.centroids().to_vec(), role, group)
}

/// Source of the per-column feedback coefficients during the main pass.
enum Feedback<'a> {
    /// Lower Cholesky factor of the inverse Hessian permuted into visiting
    /// order; row `t` of its transpose is the restricted-inverse row at step `t`.
    Sequential { factor: Vec<f64>, position: Vec<usize>, order: Vec<usize> },
    Fixed(&'a HessianData),
    HessianRow(&'a HessianData),
    Disabled(&'a HessianData),
}

impl<'a> Feedback<'a> {
    fn new(rule: Propagation, hd: &'a HessianData, order: &[usize]) -> Result<Self> {
        Ok(match rule {
            Propagation::Sequential => {
                let n = order.len();
                let mut permuted = vec![0.0; n * n];
                for (a, &qa) in order.iter().enumerate() {
                    let row = hd.hinv_row(qa);
                    for (b, &qb) in order.iter().enumerate() {
                        permuted[a * n + b] = row[qb];
                    }
                }
                let factor = linalg::cholesky(&permuted, n)?;
                let mut position = vec![0; n];
                for (t, &q) in order.iter().enumerate() {
                    position[q] = t;
                }
                Feedback::Sequential {
                    factor,
                    position,
                    order: order.to_vec(),
                }
            }
            Propagation::FixedInverse => Feedback::Fixed(hd),
            Propagation::HessianRow => Feedback::HessianRow(hd),
            Propagation::Disabled => Feedback::Disabled(hd),
        })
    }

    /// Effective `H⁻¹_qq` for the column visited at step `t`.
    fn pivot(&self, t: usize, q: usize) -> f64 {
        match self {
            Feedback::Sequential { factor, order, .. } => {
                let n = order.len();
                let l = factor[t * n + t];
                l * l
            }
            Feedback::Fixed(hd) | Feedback::HessianRow(hd) | Feedback::Disabled(hd) => {
                hd.hinv_diag()[q]
            }
        }
    }

    fn apply(
        &self,
        work: &mut WorkMatrix,
        t: usize,
        q: usize,
        q_hat: &[f32],
        unquantized: &[bool],
    ) -> Result<()> {
        match self {
            Feedback::Sequential { factor, position, order } => {
                let n = order.len();
                let ltt = factor[t * n + t];
                apply_feedback(
                    work,
                    q,
                    q_hat,
                    |j| {
                        let s = position[j];
                        if s > t { factor[s * n + t] / ltt } else { 0.0 }
                    },
                    unquantized,
                )
            }
            Feedback::Fixed(hd) => {
                let row = hd.hinv_row(q);
                apply_feedback(work, q, q_hat, |j| row[j] / row[q], unquantized)
            }
            Feedback::HessianRow(hd) => {
                let hinv_qq = hd.hinv_diag()[q];
                let dim = hd.dim();
                let h = hd.h();
                apply_feedback(work, q, q_hat, |j| h[q * dim + j] / hinv_qq, unquantized)
            }
            Feedback::Disabled(_) => apply_feedback(work, q, q_hat, |_| 0.0, unquantized),
        }
    }
}

/// Quantizes one weight matrix against its Hessian.
pub fn quantize_matrix(w: &TensorF32, hd: &HessianData, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    let (rows, cols) = w.dims2()?;
    if hd.dim() != cols {
        return Err(Error::shape(format!(
            "hessian is {0}x{0} but the weight has {cols} columns",
            hd.dim()
        )));
    }

    let outlier_cols = select_outlier_columns(w, hd, cfg.outlier_percent)?;
    let main_cols = main_columns(cols, &outlier_cols);
    if !main_cols.is_empty() && main_cols.len() < cfg.group_num {
        return Err(Error::InvalidConfig(vec![format!(
            "group_num = {} exceeds the {} non-outlier columns",
            cfg.group_num,
            main_cols.len()
        )]));
    }

    let mut codebooks = Vec::new();
    let mut padding = Padding::default();
    let mut owner = vec![usize::MAX; cols];

    let outlier_codebook = if outlier_cols.is_empty() {
        None
    } else {
        let (vs, owners, pad) = column_vectors(w, &outlier_cols, cfg.v0);
        let weights = hessian_weights(&owners, hd);
        padding.outlier = pad;
        codebooks.push(train_stage(&vs, &weights, cfg.k0, cfg, CodebookRole::Outlier, 0)?);
        for &q in &outlier_cols {
            owner[q] = codebooks.len() - 1;
        }
        Some(codebooks.len() - 1)
    };

    let mut bands = Vec::new();
    let mut band_members = Vec::new();
    if !main_cols.is_empty() {
        for (g, (start, end, members)) in split_bands(&main_cols, cfg.group_num, cols).into_iter().enumerate() {
            let (vs, owners, pad) = column_vectors(w, &members, cfg.v1);
            let weights = hessian_weights(&owners, hd);
            padding.main = pad;
            codebooks.push(train_stage(&vs, &weights, cfg.k1, cfg, CodebookRole::Main, g as u32)?);
            for &q in &members {
                owner[q] = codebooks.len() - 1;
            }
            bands.push(GroupBand {
                col_start: start,
                col_end: end,
                main_codebook: codebooks.len() - 1,
                residual_codebook: None,
            });
            band_members.push(members);
        }
    }

    // Main pass: outliers first, then the remaining columns.
    let mut order = visiting_order(&outlier_cols, cfg.column_order, hd);
    order.extend(visiting_order(&main_cols, cfg.column_order, hd));
    let feedback = Feedback::new(cfg.propagation, hd, &order)?;

    let mut work = WorkMatrix::from_tensor(w)?;
    let mut unquantized = vec![true; cols];
    let mut indices: Vec<Vec<u32>> = vec![Vec::new(); cols];
    let mut main_hat: Vec<Vec<f32>> = vec![Vec::new(); cols];
    let mut sum_delta_l = 0.0;
    for (t, &q) in order.iter().enumerate() {
        let code = quantize_column(&work, q, &codebooks[owner[q]], None)?;
        sum_delta_l += delta_l(&code.q_hat, work.column(q), feedback.pivot(t, q))?;
        unquantized[q] = false;
        feedback.apply(&mut work, t, q, &code.q_hat, &unquantized)?;
        indices[q] = code.main_idx;
        main_hat[q] = code.q_hat;
    }

    // Residual stage: fit what the main stage left of the original weights,
    // one codebook per band, no further feedback.
    let mut residual_by_col: Vec<Vec<u32>> = vec![Vec::new(); cols];
    if cfg.residual_enabled() {
        for (g, members) in band_members.iter().enumerate() {
            let (vs, owners, pad) = column_vectors_with(members, cfg.v1, |q| {
                (0..rows)
                    .map(|r| (w.at(r, q) as f64 - main_hat[q][r] as f64) as f32)
                    .collect()
            });
            let weights = hessian_weights(&owners, hd);
            padding.residual = pad;
            let opts = cfg.stage_options(CodebookRole::Residual, g as u32);
            let trained = train_residual_codebook(&vs, &weights, cfg.k2, &opts)?;
            let per_col = rows.div_ceil(cfg.v1);
            for (i, &q) in members.iter().enumerate() {
                residual_by_col[q] = trained.assignments[i * per_col..(i + 1) * per_col].to_vec();
            }
            codebooks.push(Codebook::new(
                cfg.v1,
                trained.codebook.centroids().to_vec(),
                CodebookRole::Residual,
                g as u32,
            )?);
            bands[g].residual_codebook = Some(codebooks.len() - 1);
        }
    }

    let main_indices: Vec<Vec<u32>> = main_cols.iter().map(|&q| std::mem::take(&mut indices[q])).collect();
    let residual_indices: Vec<Vec<u32>> = if cfg.residual_enabled() {
        main_cols.iter().map(|&q| std::mem::take(&mut residual_by_col[q])).collect()
    } else {
        Vec::new()
    };
    let outlier_indices: Vec<Vec<u32>> = outlier_cols.iter().map(|&q| std::mem::take(&mut indices[q])).collect();

    let mut qm = QuantizedMatrix {
        rows,
        cols,
        config: cfg.clone(),
        padding,
        outlier_cols,
        bands,
        outlier_codebook,
        codebooks,
        main_indices,
        residual_indices,
        outlier_indices,
        stats: QuantStats::default(),
    };
    let w_hat = dequantize(&qm)?;
    let err = reconstruction_error(w, &w_hat)?;
    qm.stats = QuantStats {
        proxy_loss: proxy_loss(w, &w_hat, hd)?,
        sum_delta_l,
        frobenius_mse: err.frobenius_mse,
        max_abs_err: err.max_abs_err,
    };
    Ok(qm)
}

/// Rebuilds the `M×N` matrix from indices and codebooks alone.
pub fn dequantize(qm: &QuantizedMatrix) -> Result<TensorF32> {
    qm.validate()?;
    let (rows, cols) = (qm.rows, qm.cols);
    let mut out = vec![0.0f32; rows * cols];

    let mut write_column = |q: usize, values: &[f32]| {
        for (r, &x) in values.iter().take(rows).enumerate() {
            out[r * cols + q] = x;
        }
    };

    if let Some(oc) = qm.outlier_codebook {
        let cb = &qm.codebooks[oc];
        for (&q, idx) in qm.outlier_cols.iter().zip(&qm.outlier_indices) {
            write_column(q, &gather(cb, idx, rows, None)?);
        }
    }
    for (b, band) in qm.bands.iter().enumerate() {
        let main = &qm.codebooks[band.main_codebook];
        let residual = band.residual_codebook.map(|r| &qm.codebooks[r]);
        for q in qm.band_columns(b) {
            let p = main_position(qm, q);
            let res = residual.map(|cb| (cb, qm.residual_indices[p].as_slice()));
            write_column(q, &gather(main, &qm.main_indices[p], rows, res)?);
        }
    }
    TensorF32::matrix(rows, cols, out)
}

fn main_position(qm: &QuantizedMatrix, q: usize) -> usize {
    // outliers before q shift its slot in the non-outlier list
    q - qm.outlier_cols.partition_point(|&c| c < q)
}

fn lookup(cb: &Codebook, i: u32) -> Result<&[f32]> {
    if (i as usize) < cb.k() {
        Ok(cb.centroid(i as usize))
    } else {
        Err(Error::CorruptIndices {
            index: i as usize,
            k: cb.k(),
        })
    }
}

fn gather(
    cb: &Codebook,
    idx: &[u32],
    rows: usize,
    residual: Option<(&Codebook, &[u32])>,
) -> Result<Vec<f32>> {
    let v = cb.vector_len();
    let expected = rows.div_ceil(v);
    if idx.len() != expected {
        return Err(Error::CorruptContainer(format!(
            "column has {} indices, expected {expected}",
            idx.len()
        )));
    }
    let mut out = Vec::with_capacity(expected * v);
    match residual {
        None => {
            for &i in idx {
                out.extend_from_slice(lookup(cb, i)?);
            }
        }
        Some((rcb, ridx)) => {
            if ridx.len() != expected {
                return Err(Error::CorruptContainer("residual index count mismatch".into()));
            }
            for (&i, &r) in idx.iter().zip(ridx) {
                let (a, b) = (lookup(cb, i)?, lookup(rcb, r)?);
                out.extend(a.iter().zip(b).map(|(x, y)| x + y));
            }
        }
    }
    out.truncate(rows);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_split_last_takes_remainder() {
        let bands = split_bands(&[0, 1, 3, 4, 5, 6, 7], 3, 9);
        assert_eq!(bands[0], (0, 3, vec![0, 1]));
        assert_eq!(bands[1], (3, 5, vec![3, 4]));
        assert_eq!(bands[2], (5, 9, vec![5, 6, 7]));
    }

    #[test]
    fn descending_diag_order_breaks_ties_low() {
        let h = vec![1.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 3.0];
        let hd = HessianData::from_matrix(h, 3).unwrap();
        assert_eq!(visiting_order(&[0, 1, 2], ColumnOrder::DescendingHessianDiag, &hd), vec![1, 2, 0]);
        assert_eq!(visiting_order(&[0, 1, 2], ColumnOrder::Natural, &hd), vec![0, 1, 2]);
    }

    #[test]
    fn outlier_selection_edges() {
        let w = TensorF32::matrix(1, 4, vec![1.0, 4.0, 2.0, 4.0]).unwrap();
        let hd = HessianData::identity(4);
        assert!(select_outlier_columns(&w, &hd, 0.0).unwrap().is_empty());
        assert_eq!(select_outlier_columns(&w, &hd, 100.0).unwrap(), vec![0, 1, 2, 3]);
        // tie between columns 1 and 3 goes to 1
        assert_eq!(select_outlier_columns(&w, &hd, 25.0).unwrap(), vec![1]);
    }

    #[test]
    fn exact_codebook_reproduces_matrix() {
        // 4x2 matrix, v=2 -> 4 distinct vectors, k=4
        let w = TensorF32::matrix(4, 2, vec![1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]).unwrap();
        let hd = HessianData::from_matrix(vec![2.0, 0.5, 0.5, 1.0], 2).unwrap();
        let cfg = QuantConfig {
            v1: 2,
            k1: 4,
            ..QuantConfig::default()
        };
        let qm = quantize_matrix(&w, &hd, &cfg).unwrap();
        assert_eq!(dequantize(&qm).unwrap(), w);
        assert_eq!(qm.stats.proxy_loss, 0.0);
        assert_eq!(qm.stats.frobenius_mse, 0.0);
    }

    #[test]
    fn corrupt_index_is_reported() {
        let w = TensorF32::matrix(4, 2, vec![1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]).unwrap();
        let cfg = QuantConfig {
            v1: 2,
            k1: 2,
            ..QuantConfig::default()
        };
        let mut qm = quantize_matrix(&w, &HessianData::identity(2), &cfg).unwrap();
        qm.main_indices[1][0] = 7;
        assert!(matches!(dequantize(&qm), Err(Error::CorruptIndices { index: 7, k: 2 })));
    }

    #[test]
    fn too_many_groups_is_a_config_error() {
        let w = TensorF32::matrix(4, 2, vec![0.0; 8]).unwrap();
        let cfg = QuantConfig {
            v1: 2,
            k1: 2,
            group_num: 3,
            ..QuantConfig::default()
        };
        assert!(matches!(
            quantize_matrix(&w, &HessianData::identity(2), &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }
}

//! Layer-wise proxy Hessian `H = (2/n)·X·Xᵀ + λ·mean(diag)·I` over the input
//! features of one linear operator, plus its inverse.
//!
//! H is indexed by weight-matrix columns: for `W` of shape `M×N` the Hessian
//! is `N×N`. Everything here is stored in f64.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::TensorF32;

pub const DEFAULT_DAMPING: f64 = 0.01;

/// Running `Σ 2·x·xᵀ` over calibration columns.
#[derive(Debug, Clone)]
pub struct HessianAccumulator {
    dim: usize,
    sum: Vec<f64>,
    sample_count: u64,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sum: vec![0.0; dim * dim],
            sample_count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Row-major `N×N` accumulated sum (exactly symmetric).
    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    /// Adds a batch of `s` calibration columns, given as an `N×s` matrix.
    pub fn accumulate(&mut self, batch: &TensorF32) -> Result<()> {
        let (rows, samples) = batch.dims2()?;
        if rows != self.dim {
            return Err(Error::shape(format!(
                "activation batch has {rows} rows, hessian dim is {}",
                self.dim
            )));
        }
        let n = self.dim;
        let x: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let xi = &x[i * samples..(i + 1) * samples];
            for j in i..n {
                let xj = &x[j * samples..(j + 1) * samples];
                let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
                self.sum[i * n + j] += 2.0 * dot;
            }
        }
        for i in 0..n {
            for j in 0..i {
                self.sum[i * n + j] = self.sum[j * n + i];
            }
        }
        self.sample_count += samples as u64;
        Ok(())
    }

    /// Normalizes by the sample count, dampens the diagonal and inverts.
    pub fn finalize(&self, damping_fraction: f64) -> Result<HessianData> {
        if self.sample_count == 0 {
            return Err(Error::InvalidHessian("no calibration samples accumulated".into()));
        }
        if !damping_fraction.is_finite() || damping_fraction <= 0.0 {
            return Err(Error::InvalidHessian(format!(
                "damping fraction must be positive, got {damping_fraction}"
            )));
        }
        let n = self.dim;
        let count = self.sample_count as f64;
        let mut h: Vec<f64> = self.sum.iter().map(|s| s / count).collect();
        let mean_diag = (0..n).map(|i| h[i * n + i]).sum::<f64>() / n as f64;
        let damp = damping_fraction * mean_diag;
        for i in 0..n {
            h[i * n + i] += damp;
        }
        let mut hd = HessianData::from_matrix(h, n)?;
        hd.damping_fraction = damping_fraction;
        hd.sample_count = self.sample_count;
        Ok(hd)
    }
}

/// Damped proxy Hessian, its inverse and the inverse diagonal.
#[derive(Debug, Clone)]
pub struct HessianData {
    dim: usize,
    h: Vec<f64>,
    hinv: Vec<f64>,
    hinv_diag: Vec<f64>,
    damping_fraction: f64,
    sample_count: u64,
}

impl HessianData {
    /// Wraps an already-damped SPD matrix. The inverse goes through an
    /// unpivoted Cholesky factorization; failures are surfaced, never re-damped.
    pub fn from_matrix(h: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || h.len() != dim * dim {
            return Err(Error::shape(format!(
                "hessian buffer of {} entries is not {dim}x{dim}",
                h.len()
            )));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidHessian("non-finite entry".into()));
        }
        for i in 0..dim {
            for j in 0..i {
                if h[i * dim + j] != h[j * dim + i] {
                    return Err(Error::InvalidHessian(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        let l = linalg::cholesky(&h, dim)?;
        let hinv = linalg::cholesky_inverse(&l, dim);

        let mut residual = linalg::matmul_square(&h, &hinv, dim);
        for i in 0..dim {
            residual[i * dim + i] -= 1.0;
        }
        let residual = linalg::max_abs(&residual);
        // scale-aware: 1e-6 relative to ‖H‖_max, never tighter than 1e-6 absolute
        let tolerance = 1e-6 * linalg::max_abs(&h).max(1.0);
        if residual > tolerance {
            return Err(Error::InverseResidual {
                residual,
                tolerance,
            });
        }

        let hinv_diag: Vec<f64> = (0..dim).map(|q| hinv[q * dim + q]).collect();
        if let Some(q) = hinv_diag.iter().position(|&d| d.is_nan() || d <= 0.0) {
            return Err(Error::InvalidHessian(format!("inverse diagonal {q} not positive")));
        }
        Ok(Self {
            dim,
            h,
            hinv,
            hinv_diag,
            damping_fraction: 0.0,
            sample_count: 0,
        })
    }

    /// `H = H⁻¹ = I`; reduces the quantizer to plain nearest-centroid VQ.
    pub fn identity(dim: usize) -> Self {
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            h[i * dim + i] = 1.0;
        }
        Self {
            dim,
            hinv: h.clone(),
            h,
            hinv_diag: vec![1.0; dim],
            damping_fraction: 0.0,
            sample_count: 0,
        }
    }

    pub fn from_tensor(t: &TensorF32) -> Result<Self> {
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::shape(format!("hessian must be square, got {r}x{c}")));
        }
        Self::from_matrix(t.data().iter().map(|&x| x as f64).collect(), r)
    }

    pub fn to_tensor(&self) -> TensorF32 {
        TensorF32::matrix(self.dim, self.dim, self.h.iter().map(|&x| x as f32).collect())
            .expect("hessian entries are finite")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn hinv(&self) -> &[f64] {
        &self.hinv
    }

    pub fn h_at(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim + j]
    }

    pub fn h_diag(&self, q: usize) -> f64 {
        self.h[q * self.dim + q]
    }

    pub fn hinv_row(&self, q: usize) -> &[f64] {
        &self.hinv[q * self.dim..(q + 1) * self.dim]
    }

    pub fn hinv_diag(&self) -> &[f64] {
        &self.hinv_diag
    }

    pub fn damping_fraction(&self) -> f64 {
        self.damping_fraction
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Sidecar metadata as `key=value` lines.
    pub fn metadata(&self) -> String {
        let (min, max) = (0..self.dim)
            .map(|q| self.h_diag(q))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
        let mut out = String::new();
        let _ = writeln!(out, "dim={}", self.dim);
        let _ = writeln!(out, "sample_count={}", self.sample_count);
        let _ = writeln!(out, "damping_fraction={}", self.damping_fraction);
        let _ = writeln!(out, "diag_min={min}");
        let _ = writeln!(out, "diag_max={max}");
        out
    }

    pub fn write_metadata(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.metadata())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acc_from(rows: usize, cols: usize, data: Vec<f32>) -> HessianAccumulator {
        let mut acc = HessianAccumulator::new(rows);
        acc.accumulate(&TensorF32::matrix(rows, cols, data).unwrap()).unwrap();
        acc
    }

    #[test]
    fn one_hot_column_gives_scaled_outer_product() {
        let acc = acc_from(3, 1, vec![1.0, 0.0, 0.0]);
        let mut expect = vec![0.0; 9];
        expect[0] = 2.0;
        assert_eq!(acc.sum(), expect.as_slice());
        assert_eq!(acc.sample_count(), 1);
    }

    #[test]
    fn batches_are_additive() {
        // X = [[1, 2, 3], [4, 5, 6]] split as [1;4] and [2 3; 5 6]
        let whole = acc_from(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut split = HessianAccumulator::new(2);
        split.accumulate(&TensorF32::matrix(2, 1, vec![1.0, 4.0]).unwrap()).unwrap();
        split
            .accumulate(&TensorF32::matrix(2, 2, vec![2.0, 3.0, 5.0, 6.0]).unwrap())
            .unwrap();
        assert_eq!(whole.sum(), split.sum());
        assert_eq!(whole.sample_count(), split.sample_count());
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut acc = HessianAccumulator::new(3);
        let err = acc.accumulate(&TensorF32::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn scaled_identity_finalize() {
        // sum/n = I with n = 2 samples
        let mut acc = HessianAccumulator::new(2);
        acc.sum = vec![2.0, 0.0, 0.0, 2.0];
        acc.sample_count = 2;
        let hd = acc.finalize(0.01).unwrap();
        assert_eq!(hd.h(), &[1.01, 0.0, 0.0, 1.01]);
        for d in hd.hinv_diag() {
            assert!((d - 1.0 / 1.01).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_finalize_matches_hand_arithmetic() {
        let mut acc = HessianAccumulator::new(2);
        acc.sum = vec![1.0, 0.0, 0.0, 4.0];
        acc.sample_count = 1;
        let hd = acc.finalize(0.5).unwrap();
        // mean diag 2.5, damping adds 1.25
        assert_eq!(hd.h(), &[2.25, 0.0, 0.0, 5.25]);
        assert!((hd.hinv_diag()[0] - 1.0 / 2.25).abs() < 1e-15);
        assert!((hd.hinv_diag()[1] - 1.0 / 5.25).abs() < 1e-15);
    }

    #[test]
    fn zero_feature_row_is_rescued_by_damping() {
        // feature 1 never active
        let acc = acc_from(3, 2, vec![1.0, 2.0, 0.0, 0.0, 3.0, -1.0]);
        let hd = acc.finalize(0.01).unwrap();
        assert!(hd.hinv_diag().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn finalize_preconditions() {
        let acc = HessianAccumulator::new(2);
        assert!(matches!(acc.finalize(0.01), Err(Error::InvalidHessian(_))));
        let acc = acc_from(2, 1, vec![1.0, 1.0]);
        assert!(matches!(acc.finalize(0.0), Err(Error::InvalidHessian(_))));
    }

    #[test]
    fn identity_is_exact() {
        for n in [1, 4] {
            let hd = HessianData::identity(n);
            let prod = linalg::matmul_square(hd.h(), hd.hinv(), n);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(prod[i * n + j], if i == j { 1.0 } else { 0.0 });
                }
            }
            assert!(hd.hinv_diag().iter().all(|&d| d == 1.0));
        }
    }

    #[test]
    fn from_matrix_rejects_indefinite() {
        let err = HessianData::from_matrix(vec![1.0, 2.0, 2.0, 1.0], 2);
        assert!(matches!(err, Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn metadata_lists_keys() {
        let acc = acc_from(2, 1, vec![1.0, 3.0]);
        let meta = acc.finalize(0.01).unwrap().metadata();
        assert!(meta.starts_with("dim=2\nsample_count=1\ndamping_fraction=0.01\n"));
    }
}

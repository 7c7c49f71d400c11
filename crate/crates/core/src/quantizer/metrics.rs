//! Error metrics between a weight matrix and its reconstruction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::HessianData;
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantStats {
    /// `tr(ΔW·H·ΔWᵀ)` with `ΔW = Ŵ − W`.
    pub proxy_loss: f64,
    /// Sum of the per-column closed-form losses recorded during the main pass.
    pub sum_delta_l: f64,
    pub frobenius_mse: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionError {
    pub frobenius_mse: f64,
    pub max_abs_err: f64,
    /// `‖Ŵ − W‖_F / ‖W‖_F`, 0 when `W` is all zeros.
    pub relative_frobenius: f64,
}

fn check_pair(w: &TensorF32, w_hat: &TensorF32) -> Result<(usize, usize)> {
    let dims = w.dims2()?;
    if w_hat.dims2()? != dims {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs original {:?}",
            w_hat.shape(),
            w.shape()
        )));
    }
    Ok(dims)
}

pub fn reconstruction_error(w: &TensorF32, w_hat: &TensorF32) -> Result<ReconstructionError> {
    check_pair(w, w_hat)?;
    let mut sq = 0.0f64;
    let mut norm = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &b) in w.data().iter().zip(w_hat.data()) {
        let d = b as f64 - a as f64;
        sq += d * d;
        norm += (a as f64) * (a as f64);
        max_abs = max_abs.max(d.abs());
    }
    Ok(ReconstructionError {
        frobenius_mse: sq / w.len() as f64,
        max_abs_err: max_abs,
        relative_frobenius: if norm > 0.0 { (sq / norm).sqrt() } else { 0.0 },
    })
}

/// `tr(ΔW·H·ΔWᵀ)`, summed row by row.
pub fn proxy_loss(w: &TensorF32, w_hat: &TensorF32, hd: &HessianData) -> Result<f64> {
    let (_, cols) = check_pair(w, w_hat)?;
    if hd.dim() != cols {
        return Err(Error::shape(format!("hessian dim {} vs {cols} columns", hd.dim())));
    }
    let h = hd.h();
    let per_row: Vec<f64> = w
        .data()
        .par_chunks_exact(cols)
        .zip(w_hat.data().par_chunks_exact(cols))
        .map(|(a, b)| {
            let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| y as f64 - x as f64).collect();
            let mut total = 0.0;
            for (i, &di) in d.iter().enumerate() {
                if di == 0.0 {
                    continue;
                }
                let hi = &h[i * cols..(i + 1) * cols];
                let hd_i: f64 = hi.iter().zip(&d).map(|(x, y)| x * y).sum();
                total += di * hd_i;
            }
            total
        })
        .collect();
    Ok(per_row.iter().sum())
}

/// The same quantity split into `Σ_i h_ii‖ΔW_:,i‖²` and
/// `Σ_{i≠j} h_ij⟨ΔW_:,i, ΔW_:,j⟩`, accumulated over column pairs.
pub fn proxy_loss_decomposition(
    w: &TensorF32,
    w_hat: &TensorF32,
    hd: &HessianData,
) -> Result<(f64, f64)> {
    let (rows, cols) = check_pair(w, w_hat)?;
    if hd.dim() != cols {
        return Err(Error::shape(format!("hessian dim {} vs {cols} columns", hd.dim())));
    }
    let delta: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            (0..rows)
                .map(|r| w_hat.at(r, c) as f64 - w.at(r, c) as f64)
                .collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut diag = 0.0;
    let mut cross = 0.0;
    for i in 0..cols {
        diag += hd.h_at(i, i) * dot(&delta[i], &delta[i]);
        for j in 0..cols {
            if j != i {
                cross += hd.h_at(i, j) * dot(&delta[i], &delta[j]);
            }
        }
    }
    Ok((diag, cross))
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vptq::hessian::HessianData;
use vptq::TensorF32;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller standard normal.
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TensorF32 {
    let data = (0..rows * cols).map(|_| gauss(rng) as f32).collect();
    TensorF32::matrix(rows, cols, data).unwrap()
}

/// `A·Aᵀ/samples + ridge·I` with Gaussian `A` of shape `n × samples`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, samples: usize, ridge: f64) -> Vec<f64> {
    let a: Vec<f64> = (0..n * samples).map(|_| gauss(rng)).collect();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..samples).map(|s| a[i * samples + s] * a[j * samples + s]).sum();
            let x = dot / samples as f64 + if i == j { ridge } else { 0.0 };
            h[i * n + j] = x;
            h[j * n + i] = x;
        }
    }
    h
}

pub fn random_hessian(rng: &mut ChaCha8Rng, n: usize) -> HessianData {
    HessianData::from_matrix(random_spd(rng, n, 2 * n, 0.01), n).unwrap()
}

/// `tr(D·H·Dᵀ)` for a row-major `rows × n` matrix `d`, written as a plain triple loop.
pub fn trace_form(d: &[f64], rows: usize, h: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..rows {
        for i in 0..n {
            for j in 0..n {
                total += d[r * n + i] * h[i * n + j] * d[r * n + j];
            }
        }
    }
    total
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

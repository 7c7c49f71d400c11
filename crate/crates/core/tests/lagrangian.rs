//! The single-column update against a dense KKT solve and random feasible
//! alternatives.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use vptq::quantizer::{delta_l, propagate_error, WorkMatrix};

struct Case {
    rows: usize,
    n: usize,
    q: usize,
    h: Vec<f64>,
    delta: Vec<f64>,
    loss: f64,
    expected_loss: f64,
    constraint_exact: bool,
}

fn run_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let n = 3 + (seed % 4) as usize;
    let rows = 4;
    let hd = random_hessian(&mut r, n);
    let w = random_matrix(&mut r, rows, n);
    let q = r.random_range(0..n);
    let q_hat: Vec<f32> = (0..rows).map(|_| gauss(&mut r) as f32).collect();

    let mut work = WorkMatrix::from_tensor(&w).unwrap();
    let mut unquantized = vec![true; n];
    unquantized[q] = false;
    propagate_error(&mut work, q, &q_hat, &hd, &unquantized).unwrap();

    let mut delta = vec![0.0; rows * n];
    for c in 0..n {
        for (row, x) in work.column(c).iter().enumerate() {
            delta[row * n + c] = x - w.at(row, c) as f64;
        }
    }
    let constraint_exact = work
        .column(q)
        .iter()
        .zip(&q_hat)
        .all(|(&x, &h)| x == h as f64);
    let loss = 0.5 * trace_form(&delta, rows, hd.h(), n);
    let expected_loss = delta_l(&q_hat, &w.column(q), hd.hinv_diag()[q]).unwrap();
    Case {
        rows,
        n,
        q,
        h: hd.h().to_vec(),
        delta,
        loss,
        expected_loss,
        constraint_exact,
    }
}

#[test]
fn update_satisfies_constraint_and_matches_delta_l() {
    for seed in 0..100 {
        let c = run_case(seed);
        assert!(c.constraint_exact, "seed {seed}");
        assert!(rel_close(c.loss, c.expected_loss, 1e-9), "seed {seed}: {} vs {}", c.loss, c.expected_loss);
    }
}

#[test]
fn update_matches_dense_kkt_solution() {
    for seed in 0..100 {
        let c = run_case(seed);
        let n = c.n;
        // [H  e_q; e_qᵀ 0] [x; μ] = [0; d] per row, d = required change of column q
        let mut kkt = DMatrix::<f64>::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = c.h[i * n + j];
            }
        }
        kkt[(c.q, n)] = 1.0;
        kkt[(n, c.q)] = 1.0;
        let lu = kkt.lu();
        for row in 0..c.rows {
            let mut rhs = DVector::<f64>::zeros(n + 1);
            rhs[n] = c.delta[row * n + c.q];
            let x = lu.solve(&rhs).expect("KKT system is nonsingular");
            for j in 0..n {
                let got = c.delta[row * n + j];
                assert!(
                    (got - x[j]).abs() <= 1e-9 * (1.0 + x[j].abs()),
                    "seed {seed} row {row} col {j}: {got} vs {}",
                    x[j]
                );
            }
        }
    }
}

#[test]
fn no_feasible_alternative_does_better() {
    for seed in 0..100 {
        let c = run_case(seed);
        let mut r = rng(seed ^ 0xfeed);
        for _ in 0..1000 {
            let scale = 10f64.powf(r.random_range(-4.0..1.0));
            let mut alt = c.delta.clone();
            for row in 0..c.rows {
                for j in 0..c.n {
                    if j != c.q {
                        alt[row * c.n + j] += scale * gauss(&mut r);
                    }
                }
            }
            let alt_loss = 0.5 * trace_form(&alt, c.rows, &c.h, c.n);
            assert!(c.loss <= alt_loss * (1.0 + 1e-12), "seed {seed}: {} > {alt_loss}", c.loss);
        }
    }
}

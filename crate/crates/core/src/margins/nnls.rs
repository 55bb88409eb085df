//! Nonnegative least squares, Lawson–Hanson active-set method.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// `‖A x − b‖`
    pub residual: f64,
    pub iterations: usize,
}

fn least_squares(a: &DMatrix<f64>, cols: &[usize], b: &DVector<f64>) -> DVector<f64> {
    let sub = a.select_columns(cols);
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * (a.nrows().max(cols.len()) as f64);
    svd.solve(b, eps).expect("U and V were computed")
}

/// `argmin_{x ≥ 0} ‖A x − b‖`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let n = a.ncols();
    let max_iter = 3 * n.max(1) + 30;
    let norm1 = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let tol = 10.0 * f64::EPSILON * norm1 * (a.nrows().max(n) as f64);

    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;
    loop {
        let w = a.transpose() * (b - a * &x);
        // entering column: largest dual value among the active set, lowest index on ties
        let mut enter = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol && enter.is_none_or(|e: usize| w[j] > w[e]) {
                enter = Some(j);
            }
        }
        let Some(t) = enter else { break };
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        passive[t] = true;
        loop {
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let s_p = least_squares(a, &cols, b);
            if s_p.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in cols.iter().enumerate() {
                    x[j] = s_p[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in cols.iter().enumerate() {
                if s_p[k] <= 0.0 {
                    let denom = x[j] - s_p[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &j) in cols.iter().enumerate() {
                x[j] += alpha * (s_p[k] - x[j]);
            }
            let mut dropped = false;
            for &j in &cols {
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                    dropped = true;
                }
            }
            if !dropped || !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    let residual = (a * &x - b).norm();
    NnlsSolution {
        x,
        residual,
        iterations,
    }
}

//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pairwise (tree) summation. Deterministic for a fixed input order and
/// independent of any worker count, which is what the artifact writers rely
/// on.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 64;
    if values.len() <= BASE {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// 1-norm (maximum absolute column sum).
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    let mut best: f64 = 0.0;
    for j in 0..m.ncols() {
        let mut s = 0.0;
        for i in 0..m.nrows() {
            s += m[(i, j)].abs();
        }
        best = best.max(s);
    }
    best
}

/// Condition estimate kappa_1 = |A|_1 |A^-1|_1 via an explicit inverse.
/// Only used on the small dense matrices this crate works with; returns
/// infinity when the matrix is singular.
pub fn condition_1(m: &DMatrix<f64>) -> f64 {
    match m.clone().try_inverse() {
        Some(inv) => norm_1(m) * norm_1(&inv),
        None => f64::INFINITY,
    }
}

/// Determinant via LU with partial pivoting.
pub fn determinant(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant()
}

/// Solve A x = b for small dense A, with row and column equilibration so
/// that the conditioning reported (and the solve itself) is scaling
/// invariant. The shooting Jacobian mixes rows and columns whose natural
/// scales differ by many orders of magnitude; raw conditioning says nothing
/// useful about it.
///
/// Returns `(solution, equilibrated_condition)`.
pub fn solve_equilibrated(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let nr = a.nrows();
    let nc = a.ncols();
    let mut row_scale = vec![1.0f64; nr];
    for (i, s) in row_scale.iter_mut().enumerate() {
        let mut m: f64 = 0.0;
        for j in 0..nc {
            m = m.max(a[(i, j)].abs());
        }
        if m > 0.0 {
            *s = m;
        }
    }
    let mut scaled = a.clone();
    for i in 0..nr {
        for j in 0..nc {
            scaled[(i, j)] /= row_scale[i];
        }
    }
    let mut col_scale = vec![1.0f64; nc];
    for (j, s) in col_scale.iter_mut().enumerate() {
        let mut m: f64 = 0.0;
        for i in 0..nr {
            m = m.max(scaled[(i, j)].abs());
        }
        if m > 0.0 {
            *s = m;
        }
    }
    for j in 0..nc {
        for i in 0..nr {
            scaled[(i, j)] /= col_scale[j];
        }
    }
    let cond = condition_1(&scaled);
    let rb = DVector::from_iterator(nr, b.iter().enumerate().map(|(i, v)| v / row_scale[i]));
    let lu = scaled.lu();
    let y = lu
        .solve(&rb)
        .ok_or(Error::IllConditioned { cond: f64::INFINITY })?;
    let mut x = y;
    for j in 0..nc {
        x[j] /= col_scale[j];
    }
    Ok((x, cond))
}

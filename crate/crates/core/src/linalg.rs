//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Singular values sorted ascending.
pub fn singular_values_ascending(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

/// Spectral (operator) norm.
pub fn op_norm(m: &Matrix) -> f64 {
    singular_values_ascending(m).last().copied().unwrap_or(0.0)
}

/// Eigenvalues of the symmetric part, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(|a, b| a.total_cmp(b));
    e
}

/// Spectral norm of the symmetric part.
pub fn sym_norm(m: &Matrix) -> f64 {
    let e = sym_eigenvalues(m);
    match (e.first(), e.last()) {
        (Some(a), Some(b)) => a.abs().max(b.abs()),
        _ => 0.0,
    }
}

/// Numerical rank with a tolerance relative to the largest singular value.
pub fn rank(m: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values_ascending(m);
    let top = s.last().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|v| **v > rel_tol * top).count()
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn vector(values: &[f64]) -> Vector {
    DVector::from_column_slice(values)
}

//! 3x3 covariance helpers around the lower Cholesky factor.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Packed order of the six free entries of a lower-triangular 3x3 matrix.
pub const LOWER_ENTRIES: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];

/// Packed order of the six unique entries of a symmetric 3x3 matrix, as
/// written in draw files: 11, 12, 13, 22, 23, 33.
pub const UPPER_ENTRIES: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

pub fn cholesky(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if (m - m.transpose()).abs().max() > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite("matrix is not symmetric".into()));
    }
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{m}")))
}

pub fn is_spd(m: &Matrix3<f64>) -> bool {
    cholesky(m).is_ok()
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn forward_solve(l: &Matrix3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let x0 = b[0] / l[(0, 0)];
    let x1 = (b[1] - l[(1, 0)] * x0) / l[(1, 1)];
    let x2 = (b[2] - l[(2, 0)] * x0 - l[(2, 1)] * x1) / l[(2, 2)];
    Vector3::new(x0, x1, x2)
}

/// Solve `L^T x = b` for lower-triangular `L`.
pub fn backward_solve(l: &Matrix3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let x2 = b[2] / l[(2, 2)];
    let x1 = (b[1] - l[(2, 1)] * x2) / l[(1, 1)];
    let x0 = (b[0] - l[(1, 0)] * x1 - l[(2, 0)] * x2) / l[(0, 0)];
    Vector3::new(x0, x1, x2)
}

pub fn lower_inverse(l: &Matrix3<f64>) -> Matrix3<f64> {
    let mut inv = Matrix3::zeros();
    for c in 0..3 {
        let e = Vector3::from_fn(|r, _| if r == c { 1.0 } else { 0.0 });
        inv.set_column(c, &forward_solve(l, &e));
    }
    inv
}

pub fn pack_upper(m: &Matrix3<f64>) -> [f64; 6] {
    UPPER_ENTRIES.map(|(r, c)| m[(r, c)])
}

pub fn unpack_symmetric(v: &[f64]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (&(r, c), &x) in UPPER_ENTRIES.iter().zip(v) {
        m[(r, c)] = x;
        m[(c, r)] = x;
    }
    m
}

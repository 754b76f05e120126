//! Log-Cholesky coordinates for symmetric positive-definite matrices.
//!
//! A `d × d` matrix is written `L Lᵀ` with `L` lower triangular. The unconstrained
//! vector holds the lower triangle of `L` row by row, `(0,0), (1,0), (1,1), (2,0), …`,
//! with diagonal entries stored as `ln L_ii`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// `(row, col)` of each coordinate, in storage order.
pub fn positions(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

pub fn factor_from_theta(theta: &[f64], dim: usize) -> Result<DMatrix<f64>> {
    if theta.len() != tri_len(dim) {
        return Err(Error::invalid(format!(
            "log-Cholesky vector for dimension {dim} needs {} entries, got {}",
            tri_len(dim),
            theta.len()
        )));
    }
    let mut l = DMatrix::zeros(dim, dim);
    for ((i, j), &t) in positions(dim).zip(theta) {
        l[(i, j)] = if i == j { t.exp() } else { t };
    }
    Ok(l)
}

/// Inverse map; fails if `m` is not positive definite.
pub fn theta_from_matrix(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let dim = m.nrows();
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("matrix is not positive definite"))?;
    let l = chol.l();
    Ok(positions(dim)
        .map(|(i, j)| if i == j { l[(i, i)].ln() } else { l[(i, j)] })
        .collect())
}

/// Gradient of `½ tr(P · G(θ))` with respect to the coordinates, for symmetric `P`
/// and `G = L Lᵀ`: entry `(i, j)` equals `(P L)_{ij}`, times `L_ii` on the diagonal.
pub fn half_trace_gradient(p: &DMatrix<f64>, l: &DMatrix<f64>) -> Vec<f64> {
    let pl = p * l;
    positions(l.nrows())
        .map(|(i, j)| {
            if i == j {
                pl[(i, j)] * l[(i, i)]
            } else {
                pl[(i, j)]
            }
        })
        .collect()
}

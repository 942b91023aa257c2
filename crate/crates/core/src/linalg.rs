//! SVD-backed helpers: singular values, numerical rank, orthonormal bases,
//! best low-rank approximation error.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Singular values at or below this fraction of the largest count as zero.
pub const RANK_RTOL: f64 = 1e-9;

pub fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2("to_dmatrix")?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(vec![r, c], data)
}

/// Singular values in descending order.
pub fn singular_values(t: &Tensor) -> Result<Vec<f64>> {
    let m = to_dmatrix(t)?;
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values strictly above `RANK_RTOL * σ_max`.
pub fn numerical_rank(t: &Tensor) -> Result<usize> {
    let sv = singular_values(t)?;
    Ok(rank_of(&sv))
}

pub fn rank_of(sv: &[f64]) -> usize {
    let Some(&max) = sv.first() else { return 0 };
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * max).count()
}

/// Orthonormal basis (as columns) of the column space of `t`, or `None`
/// for a numerically zero matrix.
pub fn column_basis(t: &Tensor) -> Result<Option<DMatrix<f64>>> {
    let m = to_dmatrix(t)?;
    if m.is_empty() {
        return Ok(None);
    }
    let svd = m.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Linalg("SVD did not return U".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    if max == 0.0 {
        return Ok(None);
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > RANK_RTOL * max)
        .collect();
    let cols: Vec<_> = keep.iter().map(|&i| u.column(i).into_owned()).collect();
    Ok(Some(DMatrix::from_columns(&cols)))
}

/// Frobenius error of the best rank-`k` approximation of `t`.
pub fn best_rank_k_error(t: &Tensor, k: usize) -> Result<f64> {
    let sv = singular_values(t)?;
    Ok(sv.iter().skip(k).map(|s| s * s).sum::<f64>().sqrt())
}

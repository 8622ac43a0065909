//! Small numeric helpers shared across modules.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

pub(crate) fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &Array2<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = to_nalgebra(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Lower Cholesky factor.
pub fn cholesky(m: &Array2<f64>) -> Result<Array2<f64>> {
    let chol = to_nalgebra(m)
        .cholesky()
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".to_string()))?;
    Ok(from_nalgebra(&chol.l()))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Centers a vector and scales it to unit Euclidean norm. `None` for constant input.
pub(crate) fn center_unit(x: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = x.len() as f64;
    let m = x.sum() / n;
    let c = x.mapv(|v| v - m);
    let norm = c.dot(&c).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(c / norm)
}

/// Pearson correlation between two equally long vectors.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let a = center_unit(a)?;
    let b = center_unit(b)?;
    Some(a.dot(&b).clamp(-1.0, 1.0))
}

/// Pearson correlation matrix between the rows of `x`.
pub fn row_correlation(x: &Array2<f64>) -> Result<Array2<f64>> {
    let rows = x.nrows();
    let mut z = Array2::zeros((rows, x.ncols()));
    for (r, row) in x.rows().into_iter().enumerate() {
        let c = center_unit(row)
            .ok_or_else(|| Error::Degenerate(format!("row {r} is constant")))?;
        z.row_mut(r).assign(&c);
    }
    let mut c = z.dot(&z.t());
    for i in 0..rows {
        c[[i, i]] = 1.0;
        for j in i + 1..rows {
            let v = c[[i, j]].clamp(-1.0, 1.0);
            c[[i, j]] = v;
            c[[j, i]] = v;
        }
    }
    Ok(c)
}

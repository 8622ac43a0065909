//! Linear classification head over FC vectors with a two-way softmax.

use ndarray::{Array1, Array2, ArrayView2};

use super::dense::Dense;
use crate::error::{Error, Result};

/// Logits `V W + b` for a batch of FC vectors stored as rows of `v`.
pub fn linear_head(head: &Dense, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    if v.ncols() != head.inputs() {
        return Err(Error::InvalidArgument(format!(
            "head expects {} features, got {}",
            head.inputs(),
            v.ncols()
        )));
    }
    if head.outputs() != 2 {
        return Err(Error::InvalidArgument(format!(
            "head must have 2 outputs, has {}",
            head.outputs()
        )));
    }
    Ok(head.forward(v))
}

/// Row-wise softmax, stabilized by the row max.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Probability of class 1 for each row of logits.
pub fn positive_probability(logits: ArrayView2<f64>) -> Array1<f64> {
    softmax(logits).column(1).to_owned()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[u8]) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if labels.len() != n || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y > 1 {
            return Err(Error::InvalidArgument(format!("label {y} is not binary")));
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss / n as f64, grad))
}

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Adds the first `L` rows of the trainable table `pos` (`L_max x R`) to the
/// `L x R` token matrix.
pub fn add_positional_forward(tokens: ArrayView2<f64>, pos: &Array2<f64>) -> Result<Array2<f64>> {
    let (len, dim) = tokens.dim();
    if len > pos.nrows() {
        return Err(Error::InvalidArgument(format!(
            "{len} tokens exceed the {} positional slots",
            pos.nrows()
        )));
    }
    if dim != pos.ncols() {
        return Err(Error::InvalidArgument(format!(
            "token dim {dim} != positional dim {}",
            pos.ncols()
        )));
    }
    Ok(&tokens + &pos.slice(s![..len, ..]))
}

/// Gradient of the positional table; only the first `valid` rows receive
/// gradient, later rows stay exactly zero.
pub fn add_positional_backward(dy: ArrayView2<f64>, valid: usize, max_tokens: usize) -> Array2<f64> {
    let mut dpos = Array2::zeros((max_tokens, dy.ncols()));
    dpos.slice_mut(s![..valid, ..]).assign(&dy.slice(s![..valid, ..]));
    dpos
}

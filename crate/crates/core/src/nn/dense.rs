use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{slice_of, slice_of_mut, ParamSet};

/// Affine map `x W + b` applied to each row, `W` stored as `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Nothing beyond the input is needed for the backward pass.
pub type DenseCache = Array2<f64>;

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.weight.nrows(), self.weight.ncols())
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `(dx, parameter gradients)`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, Dense) {
        let grads = Dense {
            weight: x.t().dot(&dy),
            bias: dy.sum_axis(Axis(0)),
        };
        (dy.dot(&self.weight.t()), grads)
    }

    /// Parameter gradients only.
    pub fn backward_params(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Dense {
        Dense {
            weight: x.t().dot(&dy),
            bias: dy.sum_axis(Axis(0)),
        }
    }
}

impl ParamSet for Dense {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("weight", self.weight.shape(), slice_of(&self.weight));
        f("bias", self.bias.shape(), slice_of(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weight", slice_of_mut(&mut self.weight));
        f("bias", slice_of_mut(&mut self.bias));
    }
}

use ndarray::{Array2, ArrayView2};

use super::dense::Dense;
use super::norm::{layer_norm_backward, layer_norm_forward, LayerNorm, LayerNormCache};
use super::ParamSet;

/// Position-wise `R -> FF_dim -> R` network with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub inner: Dense,
    pub outer: Dense,
}

impl FeedForwardParams {
    pub fn zeros_like(&self) -> Self {
        FeedForwardParams {
            inner: self.inner.zeros_like(),
            outer: self.outer.zeros_like(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.inner.outputs()
    }
}

// Checkpoint names: ffn.w1, ffn.b1, ffn.w2, ffn.b2.
impl ParamSet for FeedForwardParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("w1", self.inner.weight.shape(), super::slice_of(&self.inner.weight));
        f("b1", self.inner.bias.shape(), super::slice_of(&self.inner.bias));
        f("w2", self.outer.weight.shape(), super::slice_of(&self.outer.weight));
        f("b2", self.outer.bias.shape(), super::slice_of(&self.outer.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w1", super::slice_of_mut(&mut self.inner.weight));
        f("b1", super::slice_of_mut(&mut self.inner.bias));
        f("w2", super::slice_of_mut(&mut self.outer.weight));
        f("b2", super::slice_of_mut(&mut self.outer.bias));
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Array2<f64>,
    hidden: Array2<f64>,
    norm: LayerNormCache,
}

/// Post-norm feed-forward sublayer: `LayerNorm(x + W2 relu(W1 x + b1) + b2)`.
pub fn feedforward_forward(
    params: &FeedForwardParams,
    norm: &LayerNorm,
    x: ArrayView2<f64>,
) -> (Array2<f64>, FeedForwardCache) {
    let mut hidden = params.inner.forward(x);
    hidden.mapv_inplace(|v| v.max(0.0));
    let out = params.outer.forward(hidden.view());
    let (y, norm_cache) = layer_norm_forward(norm, (&x + &out).view());
    (
        y,
        FeedForwardCache {
            x: x.to_owned(),
            hidden,
            norm: norm_cache,
        },
    )
}

/// Returns `(dx, feed-forward gradients, norm gradients)`.
pub fn feedforward_backward(
    params: &FeedForwardParams,
    norm: &LayerNorm,
    cache: &FeedForwardCache,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, FeedForwardParams, LayerNorm) {
    let (dsum, dnorm) = layer_norm_backward(norm, &cache.norm, dy);
    let (mut dhidden, gouter) = params.outer.backward(cache.hidden.view(), dsum.view());
    ndarray::Zip::from(&mut dhidden)
        .and(&cache.hidden)
        .for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
    let (dx, ginner) = params.inner.backward(cache.x.view(), dhidden.view());
    (
        dsum + dx,
        FeedForwardParams {
            inner: ginner,
            outer: gouter,
        },
        dnorm,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_map, check_params, random_matrix};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_leave_normalized_residual() {
        let params = FeedForwardParams {
            inner: Dense::zeros(3, 5),
            outer: Dense::zeros(5, 3),
        };
        let norm = LayerNorm::new(3);
        let x = array![[1.0, 2.0, 4.0], [0.0, -1.0, 1.0]];
        let (y, _) = feedforward_forward(&params, &norm, x.view());
        assert_eq!(y, layer_norm_forward(&norm, x.view()).0);
    }

    #[test]
    fn relu_trace_by_hand() {
        // One hidden unit: pre-activation = x0 - x1. Output adds 2 * relu to feature 0.
        let mut inner = Dense::zeros(2, 1);
        inner.weight[[0, 0]] = 1.0;
        inner.weight[[1, 0]] = -1.0;
        let mut outer = Dense::zeros(1, 2);
        outer.weight[[0, 0]] = 2.0;
        let params = FeedForwardParams { inner, outer };
        let norm = LayerNorm {
            gain: ndarray::Array1::ones(2),
            bias: ndarray::Array1::zeros(2),
        };
        let x = array![[3.0, 1.0], [1.0, 3.0]];
        let (_, cache) = feedforward_forward(&params, &norm, x.view());
        assert_eq!(cache.hidden, array![[2.0], [0.0]]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let params = FeedForwardParams {
                inner: Dense {
                    weight: random_matrix(6, 10, &mut rng) * 0.5,
                    bias: random_matrix(1, 10, &mut rng).row(0).to_owned() * 0.3,
                },
                outer: Dense {
                    weight: random_matrix(10, 6, &mut rng) * 0.5,
                    bias: random_matrix(1, 6, &mut rng).row(0).to_owned() * 0.3,
                },
            };
            let norm = LayerNorm {
                gain: random_matrix(1, 6, &mut rng).row(0).to_owned(),
                bias: random_matrix(1, 6, &mut rng).row(0).to_owned(),
            };
            let x = random_matrix(4, 6, &mut rng);
            let (y, cache) = feedforward_forward(&params, &norm, x.view());
            let c = random_matrix(y.nrows(), y.ncols(), &mut rng);
            let (_, gp, gn) = feedforward_backward(&params, &norm, &cache, c.view());
            let err = check_params(&params, &gp, |p| (&feedforward_forward(p, &norm, x.view()).0 * &c).sum());
            assert!(err < 1e-4, "weights {err}");
            let err = check_params(&norm, &gn, |n| (&feedforward_forward(&params, n, x.view()).0 * &c).sum());
            assert!(err < 1e-4, "norm {err}");
            let err = check_map(
                &x,
                &mut rng,
                |x| feedforward_forward(&params, &norm, x.view()).0,
                |x, dy| {
                    let (_, cache) = feedforward_forward(&params, &norm, x.view());
                    feedforward_backward(&params, &norm, &cache, dy.view()).0
                },
            );
            assert!(err < 1e-4, "input {err}");
        }
    }
}

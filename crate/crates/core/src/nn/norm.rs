use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::{slice_of, slice_of_mut, ParamSet};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Per-row standardized values and the inverse standard deviations.
#[derive(Debug, Clone)]
pub struct InstanceNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Standardizes each region row over time: `(x - mean) / sqrt(var + eps)`
/// with the biased variance.
pub fn instance_norm_forward(x: ArrayView2<f64>) -> Result<(Array2<f64>, InstanceNormCache)> {
    let t = x.ncols();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "instance norm needs at least 2 time points, got {t}"
        )));
    }
    let (xhat, inv_std) = standardize_rows(x);
    Ok((xhat.clone(), InstanceNormCache { xhat, inv_std }))
}

fn standardize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / n;
        *is = 1.0 / (var + NORM_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    (xhat, inv_std)
}

/// Gradient of row standardization: `inv_std / n * (n dy - sum dy - xhat * sum(dy xhat))`.
fn standardize_rows_backward(xhat: &Array2<f64>, inv_std: &Array1<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let n = xhat.ncols() as f64;
    let mut dx = Array2::zeros(xhat.raw_dim());
    for (((mut dxr, xr), dyr), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(xhat.rows())
        .zip(dy.rows())
        .zip(inv_std.iter())
    {
        let sum_dy = dyr.sum();
        let sum_dy_x = dyr.dot(&xr);
        Zip::from(&mut dxr)
            .and(&xr)
            .and(&dyr)
            .for_each(|d, &xh, &g| *d = is / n * (n * g - sum_dy - xh * sum_dy_x));
    }
    dx
}

pub fn instance_norm_backward(cache: &InstanceNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
    standardize_rows_backward(&cache.xhat, &cache.inv_std, dy)
}

/// Affine layer normalization over the feature axis of an `L x R` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Array1::zeros(self.gain.len()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

impl ParamSet for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("gain", &[self.gain.len()], slice_of(&self.gain));
        f("bias", &[self.bias.len()], slice_of(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("gain", slice_of_mut(&mut self.gain));
        f("bias", slice_of_mut(&mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm_forward(norm: &LayerNorm, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
    let (xhat, inv_std) = standardize_rows(x);
    let y = &xhat * &norm.gain + &norm.bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, parameter gradients)`.
pub fn layer_norm_backward(
    norm: &LayerNorm,
    cache: &LayerNormCache,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, LayerNorm) {
    let grads = LayerNorm {
        gain: (&dy * &cache.xhat).sum_axis(Axis(0)),
        bias: dy.sum_axis(Axis(0)),
    };
    let dxhat = &dy * &norm.gain;
    let dx = standardize_rows_backward(&cache.xhat, &cache.inv_std, dxhat.view());
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_map, random_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_row_maps_to_zero() {
        let x = Array2::from_elem((2, 6), 3.5);
        let (y, _) = instance_norm_forward(x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_row_is_near_identity() {
        let x = ndarray::array![[1.0, -1.0, 1.0, -1.0]];
        let (y, _) = instance_norm_forward(x.view()).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_single_sample() {
        let x = Array2::<f64>::zeros((3, 1));
        assert!(instance_norm_forward(x.view()).is_err());
    }

    #[test]
    fn output_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(5, 40, &mut rng);
        let (y, _) = instance_norm_forward(x.view()).unwrap();
        for row in y.rows() {
            let m = row.mean().unwrap();
            let v = row.mapv(|v| v * v).mean().unwrap() - m * m;
            assert!(m.abs() < 1e-12);
            assert!((1.0 - 1e-3..=1.0).contains(&v), "variance {v}");
        }
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let x = random_matrix(4, 20, &mut rng);
            let err = check_map(&x, &mut rng, |x| instance_norm_forward(x.view()).unwrap().0, |x, dy| {
                let (_, cache) = instance_norm_forward(x.view()).unwrap();
                instance_norm_backward(&cache, dy.view())
            });
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_matrix(5, 6, &mut rng);
            let norm = LayerNorm {
                gain: random_matrix(1, 6, &mut rng).row(0).to_owned(),
                bias: random_matrix(1, 6, &mut rng).row(0).to_owned(),
            };
            let err = check_map(&x, &mut rng, |x| layer_norm_forward(&norm, x.view()).0, |x, dy| {
                let (_, cache) = layer_norm_forward(&norm, x.view());
                layer_norm_backward(&norm, &cache, dy.view()).0
            });
            assert!(err < 1e-4, "input relative error {err}");
        }
    }
}

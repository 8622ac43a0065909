use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::{slice_of, slice_of_mut, ParamSet};
use crate::error::{Error, Result};

/// `K` kernels of width `W` shared by every region row, one bias per kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `K x W`
    pub kernels: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl ConvParams {
    pub fn n_kernels(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn width(&self) -> usize {
        self.kernels.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            kernels: Array2::zeros(self.kernels.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            stride: self.stride,
        }
    }
}

impl ParamSet for ConvParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("kernels", self.kernels.shape(), slice_of(&self.kernels));
        f("bias", self.bias.shape(), slice_of(&self.bias));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("kernels", slice_of_mut(&mut self.kernels));
        f("bias", slice_of_mut(&mut self.bias));
    }
}

/// Number of valid (unpadded) output positions.
pub fn conv_output_len(t: usize, width: usize, stride: usize) -> Result<usize> {
    if t < width {
        return Err(Error::InvalidArgument(format!(
            "signal length {t} shorter than kernel width {width}"
        )));
    }
    Ok((t - width) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    /// `(R * L) x W` input patches.
    patches: Array2<f64>,
    regions: usize,
    len_in: usize,
}

/// Valid strided convolution of every region row: output `R x L x K`.
pub fn conv1d_forward(params: &ConvParams, x: ArrayView2<f64>) -> Result<(Array3<f64>, Conv1dCache)> {
    let (regions, t) = x.dim();
    let width = params.width();
    let len = conv_output_len(t, width, params.stride)?;
    let mut patches = Array2::zeros((regions * len, width));
    for r in 0..regions {
        let row = x.row(r);
        for l in 0..len {
            let start = l * params.stride;
            patches
                .row_mut(r * len + l)
                .assign(&row.slice(ndarray::s![start..start + width]));
        }
    }
    let out = patches.dot(&params.kernels.t()) + &params.bias;
    let out = out
        .into_shape_with_order((regions, len, params.n_kernels()))
        .expect("contiguous conv output");
    Ok((
        out,
        Conv1dCache {
            patches,
            regions,
            len_in: t,
        },
    ))
}

/// Returns `(dx, parameter gradients)` for an upstream gradient of shape `R x L x K`.
pub fn conv1d_backward(
    params: &ConvParams,
    cache: &Conv1dCache,
    dy: ArrayView3<f64>,
) -> (Array2<f64>, ConvParams) {
    let (regions, len, k) = dy.dim();
    let dy2 = dy
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((regions * len, k))
        .expect("contiguous gradient");
    let grads = ConvParams {
        kernels: dy2.t().dot(&cache.patches),
        bias: dy2.sum_axis(Axis(0)),
        stride: params.stride,
    };
    let dpatches = dy2.dot(&params.kernels);
    let width = params.width();
    let mut dx = Array2::zeros((cache.regions, cache.len_in));
    for r in 0..regions {
        for l in 0..len {
            let start = l * params.stride;
            let src = dpatches.row(r * len + l);
            let mut dst = dx.slice_mut(ndarray::s![r, start..start + width]);
            dst += &src;
        }
    }
    (dx, grads)
}

/// Mean over the kernel axis: `R x L x K -> R x L`.
pub fn gap_forward(a: ArrayView3<f64>) -> Array2<f64> {
    a.mean_axis(Axis(2)).expect("at least one kernel")
}

pub fn gap_backward(dy: ArrayView2<f64>, kernels: usize) -> Array3<f64> {
    let (r, l) = dy.dim();
    let scale = 1.0 / kernels as f64;
    Array3::from_shape_fn((r, l, kernels), |(i, j, _)| dy[[i, j]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_map, finite_diff_check, random_matrix, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng) -> ConvParams {
        ConvParams {
            kernels: random_matrix(3, 8, rng),
            bias: random_matrix(1, 3, rng).row(0).to_owned(),
            stride: 4,
        }
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_output_len(320, 8, 4).unwrap(), 79);
        assert_eq!(conv_output_len(80, 8, 4).unwrap(), 19);
        assert_eq!(conv_output_len(8, 8, 4).unwrap(), 1);
        assert!(conv_output_len(7, 8, 4).is_err());
    }

    #[test]
    fn delta_kernel_subsamples() {
        let mut kernels = Array2::zeros((1, 8));
        kernels[[0, 0]] = 1.0;
        let params = ConvParams {
            kernels,
            bias: Array1::zeros(1),
            stride: 4,
        };
        let x = Array2::from_shape_fn((2, 40), |(r, t)| (r * 100 + t) as f64);
        let (y, _) = conv1d_forward(&params, x.view()).unwrap();
        assert_eq!(y.dim(), (2, 9, 1));
        for r in 0..2 {
            for l in 0..9 {
                assert_eq!(y[[r, l, 0]], x[[r, 4 * l]]);
            }
        }
    }

    #[test]
    fn gap_arithmetic() {
        let a = Array3::from_shape_vec((1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(gap_forward(a.view())[[0, 0]], 2.5);
        let one = Array3::from_shape_fn((2, 3, 1), |(i, j, _)| (i * 3 + j) as f64);
        assert_eq!(gap_forward(one.view()), one.index_axis(Axis(2), 0));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let params = random_params(&mut rng);
            let x = random_matrix(3, 27, &mut rng);
            let (y, cache) = conv1d_forward(&params, x.view()).unwrap();
            let c = Array3::from_shape_vec(y.raw_dim(), random_matrix(1, y.len(), &mut rng).into_raw_vec_and_offset().0).unwrap();
            let (dx, grads) = conv1d_backward(&params, &cache, c.view());

            let err = crate::nn::gradcheck::check_params(&params, &grads, |p| {
                (&conv1d_forward(p, x.view()).unwrap().0 * &c).sum()
            });
            assert!(err < 1e-4, "param error {err}");

            let err = finite_diff_check(
                |flat| {
                    let xp = Array2::from_shape_vec(x.raw_dim(), flat.to_vec()).unwrap();
                    (&conv1d_forward(&params, xp.view()).unwrap().0 * &c).sum()
                },
                x.as_slice().unwrap(),
                dx.as_slice().unwrap(),
                DEFAULT_STEP,
            );
            assert!(err < 1e-4, "input error {err}");
        }
    }

    #[test]
    fn gap_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let a = random_matrix(6, 5, &mut rng);
            // Treat a 6x5 matrix as a 2x3x5 activation.
            let err = check_map(
                &a,
                &mut rng,
                |a| {
                    let a3 = a.clone().into_shape_with_order((2, 3, 5)).unwrap();
                    gap_forward(a3.view())
                },
                |_, dy| gap_backward(dy.view(), 5).into_shape_with_order((6, 5)).unwrap(),
            );
            assert!(err < 1e-4, "{err}");
        }
    }
}

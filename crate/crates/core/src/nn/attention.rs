use ndarray::{s, Array2, ArrayView2, Axis};

use super::dense::Dense;
use super::norm::{layer_norm_backward, layer_norm_forward, LayerNorm, LayerNormCache};
use super::ParamSet;
use crate::error::{Error, Result};

/// Multi-head self-attention projections. Model dim `R` is split into `heads`
/// slices of `R / heads` columns.
///
/// The key projection has no trainable bias: a per-head key offset shifts
/// every score of a query row equally and cancels in the softmax. `k.bias`
/// is kept at zero and is not part of the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
    pub heads: usize,
}

impl AttentionParams {
    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
            heads: self.heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.inputs()
    }
}

impl ParamSet for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (name, d) in [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o)] {
            d.visit(&mut |n, s, v| {
                if !(name == "k" && n == "bias") {
                    f(&format!("{name}.{n}"), s, v)
                }
            });
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, d) in [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ] {
            d.visit_mut(&mut |n, v| {
                if !(name == "k" && n == "bias") {
                    f(&format!("{name}.{n}"), v)
                }
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `L x L` attention matrix per head.
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    norm: LayerNormCache,
}

/// Post-norm attention sublayer: `LayerNorm(x + MHA(x))`. Keys whose `mask`
/// entry is false get zero attention weight.
pub fn attention_forward(
    params: &AttentionParams,
    norm: &LayerNorm,
    x: ArrayView2<f64>,
    mask: &[bool],
) -> Result<(Array2<f64>, AttentionCache)> {
    let (len, dim) = x.dim();
    if mask.len() != len {
        return Err(Error::InvalidArgument(format!(
            "mask length {} != token count {len}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("every token is masked".into()));
    }
    let heads = params.heads;
    if heads == 0 || dim % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "{heads} heads do not divide model dim {dim}"
        )));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = params.q.forward(x);
    let k = params.k.forward(x);
    let v = params.v.forward(x);
    let mut concat = Array2::zeros((len, dim));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for mut row in scores.rows_mut() {
            let mut max = f64::NEG_INFINITY;
            for (j, val) in row.iter_mut().enumerate() {
                if mask[j] {
                    *val *= scale;
                    max = max.max(*val);
                } else {
                    *val = f64::NEG_INFINITY;
                }
            }
            let mut sum = 0.0;
            for val in row.iter_mut() {
                *val = (*val - max).exp();
                sum += *val;
            }
            row.mapv_inplace(|p| p / sum);
        }
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let attended = params.o.forward(concat.view());
    let (y, norm_cache) = layer_norm_forward(norm, (&x + &attended).view());
    Ok((
        y,
        AttentionCache {
            x: x.to_owned(),
            q,
            k,
            v,
            probs,
            concat,
            norm: norm_cache,
        },
    ))
}

/// Returns `(dx, attention gradients, norm gradients)`.
pub fn attention_backward(
    params: &AttentionParams,
    norm: &LayerNorm,
    cache: &AttentionCache,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, AttentionParams, LayerNorm) {
    let (dsum, dnorm) = layer_norm_backward(norm, &cache.norm, dy);
    let (dconcat, do_) = params.o.backward(cache.concat.view(), dsum.view());
    let (len, dim) = cache.x.dim();
    let heads = params.heads;
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Array2::zeros((len, dim));
    let mut dk = Array2::zeros((len, dim));
    let mut dv = Array2::zeros((len, dim));
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let dout = dconcat.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let dp = dout.dot(&cache.v.slice(cols).t());
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let mut ds = dp;
        for ((mut row, prow), rd) in ds.rows_mut().into_iter().zip(p.rows()).zip(row_dot.iter()) {
            ndarray::Zip::from(&mut row)
                .and(&prow)
                .for_each(|d, &pp| *d = pp * (*d - rd) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let x = cache.x.view();
    let (dxq, gq) = params.q.backward(x, dq.view());
    let (dxk, gk) = params.k.backward(x, dk.view());
    let (dxv, gv) = params.v.backward(x, dv.view());
    let dx = dsum + dxq + dxk + dxv;
    (
        dx,
        AttentionParams {
            q: gq,
            k: gk,
            v: gv,
            o: do_,
            heads,
        },
        dnorm,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_map, check_params, random_matrix};
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> AttentionParams {
        let mut k = dense(rng, dim);
        k.bias.fill(0.0);
        AttentionParams {
            q: dense(rng, dim),
            k,
            v: dense(rng, dim),
            o: dense(rng, dim),
            heads,
        }
    }

    fn dense(rng: &mut ChaCha8Rng, dim: usize) -> Dense {
        Dense {
            weight: random_matrix(dim, dim, rng) * 0.5,
            bias: random_matrix(1, dim, rng).row(0).to_owned() * 0.1,
        }
    }

    fn rand_norm(rng: &mut ChaCha8Rng, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: Array1::ones(dim) + random_matrix(1, dim, rng).row(0).to_owned() * 0.2,
            bias: random_matrix(1, dim, rng).row(0).to_owned() * 0.2,
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(&mut rng, 4, 2);
        let norm = LayerNorm::new(4);
        let x = random_matrix(1, 4, &mut rng);
        let (y, _) = attention_forward(&p, &norm, x.view(), &[true]).unwrap();
        let expected = layer_norm_forward(&norm, (&x + &p.o.forward(p.v.forward(x.view()).view())).view()).0;
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(&mut rng, 6, 3);
        let row = random_matrix(1, 6, &mut rng);
        let x = ndarray::concatenate![Axis(0), row, row];
        let (y, _) = attention_forward(&p, &LayerNorm::new(6), x.view(), &[true, true]).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(&mut rng, 4, 3);
        let x = random_matrix(2, 4, &mut rng);
        assert!(attention_forward(&p, &LayerNorm::new(4), x.view(), &[true, true]).is_err());
        let p = params(&mut rng, 4, 2);
        assert!(attention_forward(&p, &LayerNorm::new(4), x.view(), &[false, false]).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(&mut rng, 4, 2);
        let norm = rand_norm(&mut rng, 4);
        let x = random_matrix(5, 4, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select(Axis(0), &perm);
        let (y, _) = attention_forward(&p, &norm, x.view(), &[true; 5]).unwrap();
        let (yp, _) = attention_forward(&p, &norm, xp.view(), &[true; 5]).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(src).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_tokens_are_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(&mut rng, 4, 2);
        let norm = rand_norm(&mut rng, 4);
        let mut x = random_matrix(6, 4, &mut rng);
        let mask = [true, true, false, true, false, false];
        let (y, _) = attention_forward(&p, &norm, x.view(), &mask).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                x.row_mut(i).mapv_inplace(|v| v * -7.0 + 3.0);
            }
        }
        let (y2, _) = attention_forward(&p, &norm, x.view(), &mask).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                assert_eq!(y.row(i), y2.row(i));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..20 {
            let p = params(&mut rng, 8, 2);
            let norm = rand_norm(&mut rng, 8);
            let x = random_matrix(5, 8, &mut rng);
            let mask: Vec<bool> = (0..5).map(|i| i < 4 || trial % 2 == 0).collect();
            let (y, cache) = attention_forward(&p, &norm, x.view(), &mask).unwrap();
            let c = random_matrix(y.nrows(), y.ncols(), &mut rng);
            let (_, gp, gn) = attention_backward(&p, &norm, &cache, c.view());
            let err = check_params(&p, &gp, |pp| {
                (&attention_forward(pp, &norm, x.view(), &mask).unwrap().0 * &c).sum()
            });
            assert!(err < 1e-4, "projection error {err}");
            let err = check_params(&norm, &gn, |nn| {
                (&attention_forward(&p, nn, x.view(), &mask).unwrap().0 * &c).sum()
            });
            assert!(err < 1e-4, "norm error {err}");
            let err = check_map(
                &x,
                &mut rng,
                |x| attention_forward(&p, &norm, x.view(), &mask).unwrap().0,
                |x, dy| {
                    let (_, cache) = attention_forward(&p, &norm, x.view(), &mask).unwrap();
                    attention_backward(&p, &norm, &cache, dy.view()).0
                },
            );
            assert!(err < 1e-4, "input error {err}");
        }
    }
}

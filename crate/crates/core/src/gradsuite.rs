//! Finite-difference gradient checks for every layer and for the composite
//! encoder + NT-Xent loss, run at a batch of random points.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{half_swap_pairing, ntxent_loss};
use crate::encoder::{cosine_fc, cosine_fc_backward, embed_backward, embed_forward, stack_vectors, vectorize_upper, HyperParams};
use crate::error::Result;
use crate::nn::gradcheck::{check_map, check_params, finite_diff_check, random_matrix, DEFAULT_STEP};
use crate::nn::{
    add_positional_backward, add_positional_forward, attention_backward, attention_forward,
    conv1d_backward, conv1d_forward, feedforward_backward, feedforward_forward, gap_backward,
    gap_forward, init_params, instance_norm_backward, instance_norm_forward, layer_norm_backward,
    layer_norm_forward, linear_head, softmax_cross_entropy, AttentionParams, ConvParams, Dense,
    FeedForwardParams, LayerNorm, ParamSet,
};
use crate::synth::stream_rng;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_POINTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn worst(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    /// Fixed-width text table, one row per layer.
    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>14}  result\n", "layer", "points", "max rel error");
        for l in &self.layers {
            out.push_str(&format!(
                "{:<20} {:>6} {:>14.3e}  {}\n",
                l.layer,
                l.points,
                l.max_rel_error,
                if l.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

const CHECKS: [(&str, Check); 11] = [
    ("instance_norm", check_instance_norm),
    ("conv1d", check_conv),
    ("gap", check_gap),
    ("positional", check_positional),
    ("attention", check_attention),
    ("feedforward", check_feedforward),
    ("layer_norm", check_layer_norm),
    ("linear_head_ce", check_head),
    ("cosine_fc", check_cosine_fc),
    ("ntxent", check_ntxent),
    ("encoder_ntxent", check_composite),
];

/// Runs every check at `points` random points. Layer `i` draws from its own
/// stream of `seed`, so results do not depend on which layers run.
pub fn run_gradcheck(points: usize, seed: u64) -> Result<GradcheckReport> {
    let mut layers = Vec::with_capacity(CHECKS.len());
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            worst = worst.max(check(&mut rng)?);
        }
        layers.push(LayerCheck {
            layer: name.to_string(),
            points,
            max_rel_error: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        step: DEFAULT_STEP,
        tolerance: TOLERANCE,
        layers,
    })
}

fn rand_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    random_matrix(1, n, rng).row(0).to_owned() * scale
}

fn rand_dense(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Dense {
    Dense {
        weight: random_matrix(inputs, outputs, rng) * (1.0 / (inputs as f64).sqrt()),
        bias: rand_vec(outputs, 0.1, rng),
    }
}

fn rand_norm(dim: usize, rng: &mut ChaCha8Rng) -> LayerNorm {
    LayerNorm {
        gain: Array1::ones(dim) + rand_vec(dim, 0.2, rng),
        bias: rand_vec(dim, 0.2, rng),
    }
}

/// `sum(c * y)` for same-shaped arrays.
fn contract<D: ndarray::Dimension>(y: &ndarray::Array<f64, D>, c: &ndarray::Array<f64, D>) -> f64 {
    (y * c).sum()
}

fn check_instance_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = random_matrix(4, 20, rng);
    Ok(check_map(
        &x,
        rng,
        |x| instance_norm_forward(x.view()).expect("valid length").0,
        |x, c| {
            let (_, cache) = instance_norm_forward(x.view()).expect("valid length");
            instance_norm_backward(&cache, c.view())
        },
    ))
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let params = ConvParams {
        kernels: random_matrix(16, 8, rng) * 0.35,
        bias: rand_vec(16, 0.1, rng),
        stride: 4,
    };
    let t = rng.random_range(20..=40);
    let x = random_matrix(4, t, rng);
    let (y, cache) = conv1d_forward(&params, x.view())?;
    let c = Array3::from_shape_simple_fn(y.raw_dim(), || rng.sample(rand_distr::StandardNormal));
    let (dx, grads) = conv1d_backward(&params, &cache, c.view());
    let input_err = finite_diff_check(
        |flat| {
            let xp = Array2::from_shape_vec(x.raw_dim(), flat.to_vec()).expect("shape");
            contract(&conv1d_forward(&params, xp.view()).expect("valid length").0, &c)
        },
        x.as_slice().expect("standard layout"),
        dx.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    );
    let param_err = check_params(&params, &grads, |p| {
        contract(&conv1d_forward(p, x.view()).expect("valid length").0, &c)
    });
    Ok(input_err.max(param_err))
}

fn check_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = Array3::from_shape_simple_fn((4, 6, 16), || rng.sample(rand_distr::StandardNormal));
    let c = random_matrix(4, 6, rng);
    let da = gap_backward(c.view(), 16);
    Ok(finite_diff_check(
        |flat| {
            let ap = Array3::from_shape_vec(a.raw_dim(), flat.to_vec()).expect("shape");
            contract(&gap_forward(ap.view()), &c)
        },
        a.as_slice().expect("standard layout"),
        da.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    ))
}

fn check_positional(rng: &mut ChaCha8Rng) -> Result<f64> {
    let max_tokens = 9;
    let len = rng.random_range(1..=max_tokens);
    let pos = random_matrix(max_tokens, 4, rng);
    let tokens = random_matrix(len, 4, rng);
    let c = random_matrix(len, 4, rng);
    let dpos = add_positional_backward(c.view(), len, max_tokens);
    let pos_err = finite_diff_check(
        |flat| {
            let pp = Array2::from_shape_vec(pos.raw_dim(), flat.to_vec()).expect("shape");
            contract(&add_positional_forward(tokens.view(), &pp).expect("fits"), &c)
        },
        pos.as_slice().expect("standard layout"),
        dpos.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    );
    let input_err = check_map(
        &tokens,
        rng,
        |x| add_positional_forward(x.view(), &pos).expect("fits"),
        |_, c| c.clone(),
    );
    Ok(pos_err.max(input_err))
}

fn check_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (len, dim, heads) = (5, 8, 2);
    let mut k = rand_dense(dim, dim, rng);
    k.bias.fill(0.0);
    let params = AttentionParams {
        q: rand_dense(dim, dim, rng),
        k,
        v: rand_dense(dim, dim, rng),
        o: rand_dense(dim, dim, rng),
        heads,
    };
    let norm = rand_norm(dim, rng);
    let valid = rng.random_range(2..=len);
    let mask: Vec<bool> = (0..len).map(|l| l < valid).collect();
    let x = random_matrix(len, dim, rng);
    let c = random_matrix(len, dim, rng);
    let forward = |p: &AttentionParams, n: &LayerNorm, x: &Array2<f64>| {
        attention_forward(p, n, x.view(), &mask).expect("valid shapes").0
    };
    let (_, cache) = attention_forward(&params, &norm, x.view(), &mask)?;
    let (_, gattn, gnorm) = attention_backward(&params, &norm, &cache, c.view());
    let input_err = check_map(
        &x,
        rng,
        |x| forward(&params, &norm, x),
        |x, c| {
            let (_, cache) = attention_forward(&params, &norm, x.view(), &mask).expect("valid shapes");
            attention_backward(&params, &norm, &cache, c.view()).0
        },
    );
    let attn_err = check_params(&params, &gattn, |p| contract(&forward(p, &norm, &x), &c));
    let norm_err = check_params(&norm, &gnorm, |n| contract(&forward(&params, n, &x), &c));
    Ok(input_err.max(attn_err).max(norm_err))
}

fn check_feedforward(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (len, dim, hidden) = (5, 8, 12);
    let params = FeedForwardParams {
        inner: rand_dense(dim, hidden, rng),
        outer: rand_dense(hidden, dim, rng),
    };
    let norm = rand_norm(dim, rng);
    let x = random_matrix(len, dim, rng);
    let c = random_matrix(len, dim, rng);
    let (_, cache) = feedforward_forward(&params, &norm, x.view());
    let (_, gffn, gnorm) = feedforward_backward(&params, &norm, &cache, c.view());
    let input_err = check_map(
        &x,
        rng,
        |x| feedforward_forward(&params, &norm, x.view()).0,
        |x, c| {
            let (_, cache) = feedforward_forward(&params, &norm, x.view());
            feedforward_backward(&params, &norm, &cache, c.view()).0
        },
    );
    let ffn_err = check_params(&params, &gffn, |p| contract(&feedforward_forward(p, &norm, x.view()).0, &c));
    let norm_err = check_params(&norm, &gnorm, |n| contract(&feedforward_forward(&params, n, x.view()).0, &c));
    Ok(input_err.max(ffn_err).max(norm_err))
}

fn check_layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let norm = rand_norm(8, rng);
    let x = random_matrix(5, 8, rng);
    let c = random_matrix(5, 8, rng);
    let (_, cache) = layer_norm_forward(&norm, x.view());
    let (_, grads) = layer_norm_backward(&norm, &cache, c.view());
    let input_err = check_map(
        &x,
        rng,
        |x| layer_norm_forward(&norm, x.view()).0,
        |x, c| {
            let (_, cache) = layer_norm_forward(&norm, x.view());
            layer_norm_backward(&norm, &cache, c.view()).0
        },
    );
    let param_err = check_params(&norm, &grads, |n| contract(&layer_norm_forward(n, x.view()).0, &c));
    Ok(input_err.max(param_err))
}

fn check_head(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, d) = (6, 10);
    let head = rand_dense(d, 2, rng);
    let v = random_matrix(n, d, rng);
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let loss = |h: &Dense, v: &Array2<f64>| {
        let logits = linear_head(h, v.view()).expect("matching dims");
        softmax_cross_entropy(logits.view(), &labels).expect("matching labels").0
    };
    let logits = linear_head(&head, v.view())?;
    let (_, dlogits) = softmax_cross_entropy(logits.view(), &labels)?;
    let (dv, dhead) = head.backward(v.view(), dlogits.view());
    let input_err = finite_diff_check(
        |flat| loss(&head, &Array2::from_shape_vec(v.raw_dim(), flat.to_vec()).expect("shape")),
        v.as_slice().expect("standard layout"),
        dv.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    );
    let param_err = check_params(&head, &dhead, |h| loss(h, &v));
    Ok(input_err.max(param_err))
}

fn check_cosine_fc(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (r, l) = (5, 7);
    let emb = random_matrix(r, l, rng);
    let c = random_matrix(1, r * (r - 1) / 2, rng).into_raw_vec_and_offset().0;
    let demb = cosine_fc_backward(emb.view(), &c)?;
    Ok(finite_diff_check(
        |flat| {
            let e = Array2::from_shape_vec((r, l), flat.to_vec()).expect("shape");
            let v = vectorize_upper(&cosine_fc(e.view()).expect("nonzero rows"));
            v.0.iter().zip(&c).map(|(a, b)| a * b).sum()
        },
        emb.as_slice().expect("standard layout"),
        demb.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    ))
}

fn check_ntxent(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, dim, tau) = (3, 10, 0.054);
    let pairing = half_swap_pairing(n);
    let z = random_matrix(2 * n, dim, rng);
    let (_, dz) = ntxent_loss(z.view(), &pairing, tau)?;
    Ok(finite_diff_check(
        |flat| {
            let zp = Array2::from_shape_vec(z.raw_dim(), flat.to_vec()).expect("shape");
            ntxent_loss(zp.view(), &pairing, tau).expect("valid batch").0
        },
        z.as_slice().expect("standard layout"),
        dz.as_slice().expect("standard layout"),
        DEFAULT_STEP,
    ))
}

/// Encoder parameters through cosine FC, vectorization and NT-Xent on a batch
/// of `2N` variable-length views.
fn check_composite(rng: &mut ChaCha8Rng) -> Result<f64> {
    let hp = HyperParams {
        n_layers: 2,
        n_heads: 2,
        ff_dim: 8,
        kernels: 8,
        l_min: 24,
        l_max: 40,
        tau: 0.2,
        ..HyperParams::default()
    };
    let regions = 4;
    let n = 2;
    let mut enc = init_params(&hp.layer_specs(regions, false), rng)?.encoder;
    // Perturb norm parameters away from (1, 0) so their gradients are exercised.
    enc.visit_mut(&mut |name, v| {
        if name.contains("norm") {
            v.iter_mut().for_each(|x| *x += 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
    });
    let views: Vec<Array2<f64>> = (0..2 * n)
        .map(|_| {
            let t = rng.random_range(hp.l_min..=hp.l_max);
            random_matrix(regions, t, rng)
        })
        .collect();
    let pairing = half_swap_pairing(n);
    let loss = |p: &crate::encoder::EncoderParams| -> Result<f64> {
        let fcs = views
            .iter()
            .map(|v| embed_forward(p, v.view(), v.ncols()).map(|t| t.fc))
            .collect::<Result<Vec<_>>>()?;
        Ok(ntxent_loss(stack_vectors(&fcs).view(), &pairing, hp.tau)?.0)
    };
    let traces = views
        .iter()
        .map(|v| embed_forward(&enc, v.view(), v.ncols()))
        .collect::<Result<Vec<_>>>()?;
    let z = stack_vectors(&traces.iter().map(|t| t.fc.clone()).collect::<Vec<_>>());
    let (_, dz) = ntxent_loss(z.view(), &pairing, hp.tau)?;
    let mut grads = enc.zeros_like();
    for (i, trace) in traces.iter().enumerate() {
        grads.add_assign_from(&embed_backward(&enc, trace, dz.row(i).as_slice().expect("row-major"))?);
    }
    Ok(check_params(&enc, &grads, |p| loss(p).expect("valid batch")))
}

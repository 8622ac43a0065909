use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::attention::AttentionParams;
use super::conv::ConvParams;
use super::dense::Dense;
use super::feedforward::FeedForwardParams;
use super::norm::LayerNorm;
use crate::encoder::{Block, EncoderParams, ModelState};
use crate::error::{Error, Result};

/// One entry of the architecture description consumed by [`init_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    InstanceNorm,
    Conv1d { kernels: usize, width: usize, stride: usize },
    Gap,
    PosEncoding { max_tokens: usize, dim: usize },
    Attention { dim: usize, heads: usize },
    Feedforward { dim: usize, hidden: usize },
    LayerNorm { dim: usize },
    Linear { inputs: usize, outputs: usize },
}

fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Dense layer with uniform fan-in weights and zero bias.
pub fn init_dense(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Dense {
    Dense {
        weight: uniform_fan_in(inputs, outputs, inputs, rng),
        bias: Array1::zeros(outputs),
    }
}

/// Draws initial parameters: weights uniform in `±1/sqrt(fan_in)`, biases
/// zero, layer-norm gains one, positional table normal with sd 0.02.
///
/// The layer list must follow the encoder layout: instance norm, conv,
/// pooling, positional table, then repeated `attention, layer_norm,
/// feedforward, layer_norm` blocks and an optional final linear head.
pub fn init_params(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<ModelState> {
    let mut conv = None;
    let mut pos = None;
    let mut blocks = Vec::new();
    let mut head = None;
    let mut i = 0;
    let bad = |msg: &str| Error::InvalidArgument(format!("layer list: {msg}"));
    while i < specs.len() {
        match specs[i] {
            LayerSpec::InstanceNorm | LayerSpec::Gap => {}
            LayerSpec::Conv1d { kernels, width, stride } => {
                if kernels == 0 || width == 0 || stride == 0 {
                    return Err(bad("conv sizes must be positive"));
                }
                conv = Some(ConvParams {
                    kernels: uniform_fan_in(kernels, width, width, rng),
                    bias: Array1::zeros(kernels),
                    stride,
                });
            }
            LayerSpec::PosEncoding { max_tokens, dim } => {
                let normal = Normal::new(0.0, 0.02).expect("valid sd");
                pos = Some(Array2::from_shape_simple_fn((max_tokens, dim), || normal.sample(rng)));
            }
            LayerSpec::Attention { dim, heads } => {
                if heads == 0 || dim % heads != 0 {
                    return Err(bad("attention heads must divide the model dim"));
                }
                let (norm1_dim, ff, norm2_dim) = match specs.get(i + 1..i + 4) {
                    Some(
                        [LayerSpec::LayerNorm { dim: a }, LayerSpec::Feedforward { dim: fd, hidden }, LayerSpec::LayerNorm { dim: b }],
                    ) if *a == dim && *fd == dim && *b == dim => (*a, *hidden, *b),
                    _ => return Err(bad("attention must be followed by layer_norm, feedforward, layer_norm of equal dim")),
                };
                let attn = AttentionParams {
                    q: init_dense(dim, dim, rng),
                    k: init_dense(dim, dim, rng),
                    v: init_dense(dim, dim, rng),
                    o: init_dense(dim, dim, rng),
                    heads,
                };
                let ffn = FeedForwardParams {
                    inner: init_dense(dim, ff, rng),
                    outer: init_dense(ff, dim, rng),
                };
                blocks.push(Block {
                    attn,
                    norm1: LayerNorm::new(norm1_dim),
                    ffn,
                    norm2: LayerNorm::new(norm2_dim),
                });
                i += 4;
                continue;
            }
            LayerSpec::Feedforward { .. } | LayerSpec::LayerNorm { .. } => {
                return Err(bad("feedforward/layer_norm outside a transformer block"));
            }
            LayerSpec::Linear { inputs, outputs } => {
                head = Some(init_dense(inputs, outputs, rng));
            }
        }
        i += 1;
    }
    let conv = conv.ok_or_else(|| bad("missing conv1d"))?;
    let pos = pos.ok_or_else(|| bad("missing pos_encoding"))?;
    if let Some(b) = blocks.first() {
        if b.attn.dim() != pos.ncols() {
            return Err(bad("positional dim differs from attention dim"));
        }
    }
    Ok(ModelState {
        encoder: EncoderParams { conv, pos, blocks },
        head,
    })
}

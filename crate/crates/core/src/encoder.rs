//! The VarCoNet encoder: `R x T` time series to tokens, through the
//! transformer blocks, to an `R x L` embedding whose row-wise cosine
//! similarities form the learned connectome.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_positional_backward, add_positional_forward, attention_backward, attention_forward,
    conv1d_backward, conv1d_forward, conv_output_len, feedforward_backward, feedforward_forward,
    gap_backward, gap_forward, instance_norm_forward, AttentionCache, AttentionParams,
    Conv1dCache, ConvParams, Dense, FeedForwardCache, FeedForwardParams, LayerNorm, LayerSpec,
    ParamSet,
};

/// Encoder architecture and contrastive training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub l_min: usize,
    pub l_max: usize,
    pub kernels: usize,
    pub kernel_width: usize,
    pub stride: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            n_layers: 1,
            n_heads: 1,
            ff_dim: 2048,
            batch_size: 64,
            lr: 2.375e-4,
            tau: 0.054,
            l_min: 80,
            l_max: 320,
            kernels: 16,
            kernel_width: 8,
            stride: 4,
        }
    }
}

impl HyperParams {
    /// Checks internal consistency and, when `regions` is given, that the
    /// head count divides it.
    pub fn validate(&self, regions: Option<usize>) -> Result<()> {
        let fail = |key: &str, msg: String| Err(Error::Invariant(format!("model.{key}: {msg}")));
        if self.n_layers == 0 {
            return fail("n_layers", "must be at least 1".into());
        }
        if self.n_heads == 0 {
            return fail("n_heads", "must be at least 1".into());
        }
        if let Some(r) = regions {
            if r % self.n_heads != 0 {
                return fail("n_heads", format!("{} does not divide R = {r}", self.n_heads));
            }
        }
        if self.ff_dim == 0 {
            return fail("ff_dim", "must be at least 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size", "must be at least 2".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail("lr", "must be positive".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return fail("tau", "must be positive".into());
        }
        if self.kernels == 0 || self.kernel_width == 0 || self.stride == 0 {
            return fail("kernels", "conv sizes must be positive".into());
        }
        if self.l_min < self.kernel_width {
            return fail(
                "l_min",
                format!("{} is below the kernel width {}", self.l_min, self.kernel_width),
            );
        }
        if self.l_min > self.l_max {
            return fail("l_min", format!("{} exceeds l_max {}", self.l_min, self.l_max));
        }
        Ok(())
    }

    pub fn max_tokens(&self) -> usize {
        (self.l_max - self.kernel_width) / self.stride + 1
    }

    pub fn token_count(&self, t_valid: usize) -> Result<usize> {
        conv_output_len(t_valid, self.kernel_width, self.stride)
    }

    /// Architecture list for [`crate::nn::init_params`].
    pub fn layer_specs(&self, regions: usize, with_head: bool) -> Vec<LayerSpec> {
        let mut specs = vec![
            LayerSpec::InstanceNorm,
            LayerSpec::Conv1d {
                kernels: self.kernels,
                width: self.kernel_width,
                stride: self.stride,
            },
            LayerSpec::Gap,
            LayerSpec::PosEncoding {
                max_tokens: self.max_tokens(),
                dim: regions,
            },
        ];
        for _ in 0..self.n_layers {
            specs.extend([
                LayerSpec::Attention {
                    dim: regions,
                    heads: self.n_heads,
                },
                LayerSpec::LayerNorm { dim: regions },
                LayerSpec::Feedforward {
                    dim: regions,
                    hidden: self.ff_dim,
                },
                LayerSpec::LayerNorm { dim: regions },
            ]);
        }
        if with_head {
            specs.push(LayerSpec::Linear {
                inputs: num_edges(regions),
                outputs: 2,
            });
        }
        specs
    }
}

/// Token count for a signal of `t_valid` samples with the fixed conv geometry.
pub fn valid_token_count(t_valid: usize) -> Result<usize> {
    conv_output_len(t_valid, 8, 4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: AttentionParams,
    pub norm1: LayerNorm,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNorm,
}

impl Block {
    fn zeros_like(&self) -> Self {
        Block {
            attn: self.attn.zeros_like(),
            norm1: self.norm1.zeros_like(),
            ffn: self.ffn.zeros_like(),
            norm2: self.norm2.zeros_like(),
        }
    }
}

impl ParamSet for Block {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.attn.visit(&mut |n, s, v| f(&format!("attn.{n}"), s, v));
        self.ffn.visit(&mut |n, s, v| f(&format!("ffn.{n}"), s, v));
        self.norm1.visit(&mut |n, s, v| f(&format!("norm1.{n}"), s, v));
        self.norm2.visit(&mut |n, s, v| f(&format!("norm2.{n}"), s, v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attn.visit_mut(&mut |n, v| f(&format!("attn.{n}"), v));
        self.ffn.visit_mut(&mut |n, v| f(&format!("ffn.{n}"), v));
        self.norm1.visit_mut(&mut |n, v| f(&format!("norm1.{n}"), v));
        self.norm2.visit_mut(&mut |n, v| f(&format!("norm2.{n}"), v));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv: ConvParams,
    /// `max_tokens x R`
    pub pos: Array2<f64>,
    pub blocks: Vec<Block>,
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            conv: self.conv.zeros_like(),
            pos: Array2::zeros(self.pos.raw_dim()),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    pub fn n_regions(&self) -> usize {
        self.pos.ncols()
    }
}

impl ParamSet for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.conv.visit(&mut |n, s, v| f(&format!("conv.{n}"), s, v));
        f("pos.encoding", self.pos.shape(), crate::nn::slice_of(&self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, s, v| f(&format!("layer{i}.{n}"), s, v));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv.visit_mut(&mut |n, v| f(&format!("conv.{n}"), v));
        f("pos.encoding", crate::nn::slice_of_mut(&mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |n, v| f(&format!("layer{i}.{n}"), v));
        }
    }
}

/// Encoder weights plus the optional linear classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: EncoderParams,
    pub head: Option<Dense>,
}

impl ParamSet for ModelState {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(f);
        if let Some(h) = &self.head {
            h.visit(&mut |n, s, v| f(&format!("head.{n}"), s, v));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(f);
        if let Some(h) = &mut self.head {
            h.visit_mut(&mut |n, v| f(&format!("head.{n}"), v));
        }
    }
}

impl ModelState {
    /// Rebuilds a model from checkpoint tensors using the architecture implied
    /// by `hp` and the positional table width.
    pub fn from_tensors(hp: &HyperParams, tensors: &[crate::dataio::NamedTensor]) -> Result<Self> {
        let pos = tensors
            .iter()
            .find(|t| t.name == "pos.encoding")
            .ok_or_else(|| Error::Format("checkpoint lacks pos.encoding".into()))?;
        let regions = *pos
            .shape
            .get(1)
            .ok_or_else(|| Error::Format("pos.encoding must be 2-D".into()))?;
        let with_head = tensors.iter().any(|t| t.name == "head.weight");
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut state = crate::nn::init_params(&hp.layer_specs(regions, with_head), &mut rng)?;
        state.load_named(tensors)?;
        Ok(state)
    }
}

/// Row-wise cosine-similarity connectome: symmetric, unit diagonal, entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FCMatrix(pub Array2<f64>);

/// Row-major upper triangle (`i < j`) of an [`FCMatrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FCVector(pub Vec<f64>);

pub fn num_edges(regions: usize) -> usize {
    regions * regions.saturating_sub(1) / 2
}

/// Recovers `R` from a vector length `R(R-1)/2`.
pub fn regions_for_edges(edges: usize) -> Option<usize> {
    let r = ((1.0 + (1.0 + 8.0 * edges as f64).sqrt()) / 2.0).round() as usize;
    (num_edges(r) == edges).then_some(r)
}

/// Region pair of the `index`-th upper-triangle entry.
pub fn edge_pair(index: usize, regions: usize) -> (usize, usize) {
    let mut remaining = index;
    for i in 0..regions {
        let row = regions - i - 1;
        if remaining < row {
            return (i, i + 1 + remaining);
        }
        remaining -= row;
    }
    panic!("edge index {index} out of range for {regions} regions");
}

impl FCVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn vectorize_upper(fc: &FCMatrix) -> FCVector {
    let r = fc.0.nrows();
    let mut out = Vec::with_capacity(num_edges(r));
    for i in 0..r {
        for j in i + 1..r {
            out.push(fc.0[[i, j]]);
        }
    }
    FCVector(out)
}

pub fn devectorize_upper(v: &FCVector) -> Result<FCMatrix> {
    let r = regions_for_edges(v.len())
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a triangular count", v.len())))?;
    let mut m = Array2::eye(r);
    let mut k = 0;
    for i in 0..r {
        for j in i + 1..r {
            m[[i, j]] = v.0[k];
            m[[j, i]] = v.0[k];
            k += 1;
        }
    }
    Ok(FCMatrix(m))
}

/// Unit-normalized rows and their original norms.
fn unit_rows(emb: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = emb.to_owned();
    let mut norms = Vec::with_capacity(emb.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::Degenerate(format!(
                "embedding row {i} has norm {n:e}"
            )));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((unit, norms))
}

pub fn cosine_fc(emb: ArrayView2<f64>) -> Result<FCMatrix> {
    let (unit, _) = unit_rows(emb)?;
    let r = unit.nrows();
    let mut fc = Array2::eye(r);
    for i in 0..r {
        for j in i + 1..r {
            let v = unit.row(i).dot(&unit.row(j)).clamp(-1.0, 1.0);
            fc[[i, j]] = v;
            fc[[j, i]] = v;
        }
    }
    Ok(FCMatrix(fc))
}

/// Gradient of `vectorize_upper(cosine_fc(emb))` with respect to `emb`.
pub fn cosine_fc_backward(emb: ArrayView2<f64>, dvec: &[f64]) -> Result<Array2<f64>> {
    let (unit, norms) = unit_rows(emb)?;
    let r = unit.nrows();
    let mut g = Array2::zeros((r, r));
    let mut k = 0;
    for i in 0..r {
        for j in i + 1..r {
            g[[i, j]] = dvec[k];
            g[[j, i]] = dvec[k];
            k += 1;
        }
    }
    let dunit = g.dot(&unit);
    let mut demb = Array2::zeros(unit.raw_dim());
    for i in 0..r {
        let u = unit.row(i);
        let du = dunit.row(i);
        let radial = u.dot(&du);
        demb.row_mut(i)
            .assign(&((&du - &(&u * radial)) / norms[i]));
    }
    Ok(demb)
}

struct BlockCache {
    attn: AttentionCache,
    ffn: FeedForwardCache,
}

/// Intermediate values kept for [`encode_backward`].
pub struct EncodeCache {
    conv: Conv1dCache,
    kernels: usize,
    blocks: Vec<BlockCache>,
    padded_tokens: usize,
    valid_tokens: usize,
}

impl EncodeCache {
    pub fn valid_tokens(&self) -> usize {
        self.valid_tokens
    }
}

/// Encodes `x` (`R x T_valid`) after zero-padding it to `padded_to` samples.
/// Tokens whose receptive field touches padding are masked out of attention
/// and dropped from the output, which is `R x valid_token_count(T_valid)`.
pub fn encode_forward(
    params: &EncoderParams,
    x: ArrayView2<f64>,
    padded_to: usize,
) -> Result<(Array2<f64>, EncodeCache)> {
    let (regions, t_valid) = x.dim();
    if regions != params.n_regions() {
        return Err(Error::InvalidArgument(format!(
            "input has {regions} regions, model expects {}",
            params.n_regions()
        )));
    }
    if padded_to < t_valid {
        return Err(Error::InvalidArgument(format!(
            "cannot pad {t_valid} samples down to {padded_to}"
        )));
    }
    let width = params.conv.width();
    let stride = params.conv.stride;
    let valid_tokens = conv_output_len(t_valid, width, stride)?;
    let (normed, _) = instance_norm_forward(x)?;
    let input = if padded_to == t_valid {
        normed
    } else {
        let mut padded = Array2::zeros((regions, padded_to));
        padded.slice_mut(s![.., ..t_valid]).assign(&normed);
        padded
    };
    let (act, conv_cache) = conv1d_forward(&params.conv, input.view())?;
    let pooled = gap_forward(act.view());
    let padded_tokens = pooled.ncols();
    let mut tokens = add_positional_forward(pooled.t(), &params.pos)?;
    let mask: Vec<bool> = (0..padded_tokens).map(|l| l < valid_tokens).collect();
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (h, attn) = attention_forward(&block.attn, &block.norm1, tokens.view(), &mask)?;
        let (out, ffn) = feedforward_forward(&block.ffn, &block.norm2, h.view());
        tokens = out;
        caches.push(BlockCache { attn, ffn });
    }
    let emb = tokens.slice(s![..valid_tokens, ..]).t().to_owned();
    Ok((
        emb,
        EncodeCache {
            conv: conv_cache,
            kernels: params.conv.n_kernels(),
            blocks: caches,
            padded_tokens,
            valid_tokens,
        },
    ))
}

pub fn encode(params: &EncoderParams, x: ArrayView2<f64>, padded_to: usize) -> Result<Array2<f64>> {
    encode_forward(params, x, padded_to).map(|(e, _)| e)
}

/// Parameter gradients for an upstream gradient on the `R x L_valid` embedding.
pub fn encode_backward(params: &EncoderParams, cache: &EncodeCache, demb: ArrayView2<f64>) -> EncoderParams {
    let regions = params.n_regions();
    let mut dtokens = Array2::zeros((cache.padded_tokens, regions));
    dtokens
        .slice_mut(s![..cache.valid_tokens, ..])
        .assign(&demb.t());
    let mut grads = params.zeros_like();
    for ((block, bc), gblock) in params
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        let (dh, gffn, gnorm2) = feedforward_backward(&block.ffn, &block.norm2, &bc.ffn, dtokens.view());
        let (dx, gattn, gnorm1) = attention_backward(&block.attn, &block.norm1, &bc.attn, dh.view());
        gblock.ffn = gffn;
        gblock.norm2 = gnorm2;
        gblock.attn = gattn;
        gblock.norm1 = gnorm1;
        dtokens = dx;
    }
    grads.pos = add_positional_backward(dtokens.view(), cache.valid_tokens, params.pos.nrows());
    let dpooled = dtokens.t();
    let dact = gap_backward(dpooled, cache.kernels);
    let (_, gconv) = conv1d_backward(&params.conv, &cache.conv, dact.view());
    grads.conv = gconv;
    grads
}

/// Longest input the positional table covers.
pub fn max_input_len(params: &EncoderParams) -> usize {
    (params.pos.nrows().max(1) - 1) * params.conv.stride + params.conv.width()
}

/// Full embedding path: encode without extra padding, cosine FC, upper triangle.
/// Inputs longer than [`max_input_len`] are covered by `ceil(T / max)` evenly
/// spaced full-length windows whose FC vectors are averaged.
pub fn embed(params: &EncoderParams, x: ArrayView2<f64>) -> Result<FCVector> {
    let t = x.ncols();
    let max = max_input_len(params);
    if t <= max {
        let emb = encode(params, x, t)?;
        return Ok(vectorize_upper(&cosine_fc(emb.view())?));
    }
    let starts = crate::evalsuite::spaced_segments(t, max, t.div_ceil(max))?;
    let mut total: Option<Vec<f64>> = None;
    for &start in &starts {
        let v = embed(params, x.slice(s![.., start..start + max]))?.0;
        match &mut total {
            Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
            None => total = Some(v),
        }
    }
    let n = starts.len() as f64;
    Ok(FCVector(total.expect("at least one window").into_iter().map(|v| v / n).collect()))
}

/// Forward pass that also returns what is needed to backpropagate from the FC vector.
pub struct EmbedTrace {
    pub fc: FCVector,
    emb: Array2<f64>,
    cache: EncodeCache,
}

pub fn embed_forward(params: &EncoderParams, x: ArrayView2<f64>, padded_to: usize) -> Result<EmbedTrace> {
    let (emb, cache) = encode_forward(params, x, padded_to)?;
    let fc = vectorize_upper(&cosine_fc(emb.view())?);
    Ok(EmbedTrace { fc, emb, cache })
}

pub fn embed_backward(params: &EncoderParams, trace: &EmbedTrace, dfc: &[f64]) -> Result<EncoderParams> {
    let demb = cosine_fc_backward(trace.emb.view(), dfc)?;
    Ok(encode_backward(params, &trace.cache, demb.view()))
}

/// Stacks row vectors into an `N x D` matrix.
pub fn stack_vectors(vs: &[FCVector]) -> Array2<f64> {
    let d = vs.first().map_or(0, FCVector::len);
    let mut m = Array2::zeros((vs.len(), d));
    for (mut row, v) in m.axis_iter_mut(Axis(0)).zip(vs) {
        row.assign(&ndarray::ArrayView1::from(&v.0[..]));
    }
    m
}

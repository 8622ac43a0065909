//! Differentiable layers with hand-written reverse-mode gradients.
//!
//! Every layer is a pair of free functions: `*_forward` returns the output
//! and a cache, `*_backward` maps the upstream gradient back to inputs and
//! parameters. Parameter containers implement [`ParamSet`] so that the
//! optimizer and checkpoint code can walk them by name.

mod attention;
mod conv;
mod dense;
mod feedforward;
pub mod gradcheck;
mod head;
mod init;
mod norm;
mod positional;

pub use attention::{attention_backward, attention_forward, AttentionCache, AttentionParams};
pub use conv::{
    conv1d_backward, conv1d_forward, conv_output_len, gap_backward, gap_forward, Conv1dCache,
    ConvParams,
};
pub use dense::{Dense, DenseCache};
pub use feedforward::{feedforward_backward, feedforward_forward, FeedForwardCache, FeedForwardParams};
pub use head::{linear_head, positive_probability, softmax, softmax_cross_entropy};
pub use init::{init_dense, init_params, LayerSpec};
pub use norm::{
    instance_norm_backward, instance_norm_forward, layer_norm_backward, layer_norm_forward,
    InstanceNormCache, LayerNorm, LayerNormCache, NORM_EPS,
};
pub use positional::{add_positional_backward, add_positional_forward};

use crate::dataio::NamedTensor;
use crate::error::{Error, Result};

/// A named tensor together with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

/// A fixed, ordered collection of named parameter tensors.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, values| {
            out.push(NamedTensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                values: values.to_vec(),
            })
        });
        out
    }

    fn param_tensors(&self, grads: &Self) -> Vec<ParamTensor>
    where
        Self: Sized,
    {
        self.named_tensors()
            .into_iter()
            .zip(grads.named_tensors())
            .map(|(p, g)| ParamTensor {
                name: p.name,
                shape: p.shape,
                values: p.values,
                grad: g.values,
            })
            .collect()
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(&values[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let other = other.flat();
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            for (a, b) in v.iter_mut().zip(&other[offset..]) {
                *a += b;
            }
            offset += v.len();
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= factor));
    }

    fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, v| v.fill(0.0));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// Overwrites values from checkpoint tensors matched by name and shape.
    fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut shapes = Vec::new();
        self.visit(&mut |name, shape, _| shapes.push((name.to_string(), shape.to_vec())));
        let mut sources = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let t = tensors
                .iter()
                .find(|t| &t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if &t.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?} != model shape {shape:?}",
                    t.shape
                )));
            }
            sources.push(&t.values);
        }
        let mut idx = 0;
        self.visit_mut(&mut |_, v| {
            v.copy_from_slice(sources[idx]);
            idx += 1;
        });
        Ok(())
    }
}

pub(crate) fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter arrays use standard layout")
}

pub(crate) fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays use standard layout")
}

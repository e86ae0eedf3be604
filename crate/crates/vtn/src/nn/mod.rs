//! Transformer building blocks: linear/layernorm primitives wrapped as
//! parameter-holding modules, multi-head attention, scaled positional
//! encoding, the decoder prenet, and the convolutional postnet.

mod attention;
mod layers;
mod positional;
mod postnet;
mod prenet;

pub use attention::{causal_mask, AttnRecord, MultiHeadAttention};
pub use layers::{DecoderLayer, DecoderStepCache, EncoderLayer, FeedForward};
pub use positional::ScaledPositionalEncoding;
pub use postnet::Postnet;
pub use prenet::Prenet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::rng::{fnv1a, mix2};
use crate::scalar::{sc, Scalar};
use crate::tensor::{Graph, Param, Tensor, TensorError, TensorId};

/// Source of dropout masks for one forward pass.
///
/// `key` fixes every mask drawn during the pass; masks additionally depend on
/// a per-site tag and absolute element coordinates, so teacher-forced and
/// step-by-step decoding of the same sequence see identical masks.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCtx {
    pub key: u64,
    pub train: bool,
}

impl DropoutCtx {
    /// Training-step context: masks change every step.
    pub fn train_step(seed: u64, step: u64) -> Self {
        DropoutCtx {
            key: mix2(seed, step),
            train: true,
        }
    }

    /// Evaluation context: only always-on sites (the prenet) stay stochastic,
    /// with masks fixed by `key` for reproducibility.
    pub fn eval(key: u64) -> Self {
        DropoutCtx { key, train: false }
    }
}

/// Stable per-site dropout tag derived from the owning parameter scope.
fn site_tag(scope: &str) -> u64 {
    fnv1a(scope.as_bytes())
}

/// Apply a train-only dropout site.
fn dropout_site<S: Scalar>(
    g: &mut Graph<S>,
    x: TensorId,
    rate: f64,
    site: u64,
    ctx: DropoutCtx,
    row_offset: usize,
) -> Result<TensorId, TensorError> {
    if !ctx.train || rate == 0.0 {
        return Ok(x);
    }
    g.dropout(x, rate, mix2(ctx.key, site), row_offset)
}

/// Xavier-uniform initialization.
pub fn xavier<S: Scalar>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha12Rng,
) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel).map(|_| sc::<S>(rng.gen_range(-a..a))).collect();
    Tensor {
        shape,
        data,
        requires_grad: true,
        grad: None,
    }
}

/// Fully connected layer, optionally with bias.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub w: Param<S>,
    pub b: Option<Param<S>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<S: Scalar> Linear<S> {
    pub fn new(scope: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut lin = Self::without_bias(scope, in_dim, out_dim, rng);
        lin.b = Some(Param::new(
            format!("{scope}.bias"),
            Tensor::zeros(vec![out_dim], true),
        ));
        lin
    }

    /// Key projections use this: a constant shift of every key is a no-op
    /// under softmax, so a key bias would be a parameter without a gradient.
    pub fn without_bias(scope: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let w = Param::new(
            format!("{scope}.weight"),
            xavier(vec![in_dim, out_dim], in_dim, out_dim, rng),
        );
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: TensorId) -> Result<TensorId, TensorError> {
        let w = g.param(&self.w)?;
        let y = g.matmul(x, w)?;
        match &self.b {
            Some(b) => {
                let b = g.param(b)?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        out.push(self.w.clone());
        if let Some(b) = &self.b {
            out.push(b.clone());
        }
    }
}

/// Layer normalization module; `enabled = false` turns it into the identity
/// (test configurations use this to expose the bare residual path).
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub eps: S,
    pub enabled: bool,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(scope: &str, dim: usize, eps: f64, enabled: bool) -> Self {
        let mut gamma = Tensor::zeros(vec![dim], true);
        gamma.data.iter_mut().for_each(|v| *v = S::one());
        LayerNorm {
            gamma: Param::new(format!("{scope}.gamma"), gamma),
            beta: Param::new(format!("{scope}.beta"), Tensor::zeros(vec![dim], true)),
            eps: sc::<S>(eps),
            enabled,
        }
    }

    pub fn forward(&self, g: &mut Graph<S>, x: TensorId) -> Result<TensorId, TensorError> {
        if !self.enabled {
            return Ok(x);
        }
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layernorm(x, gamma, beta, self.eps)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

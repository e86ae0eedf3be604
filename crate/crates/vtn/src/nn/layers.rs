//! Pre-layernorm transformer layers.
//!
//! Each sublayer is `x + Dropout(Sublayer(LN(x)))`; a disabled layernorm
//! (test configurations) makes a zero-weight layer an exact identity.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;
use crate::tensor::{Graph, Param, Tensor, TensorError, TensorId};

use super::attention::{AttnRecord, MultiHeadAttention};
use super::{dropout_site, site_tag, DropoutCtx, LayerNorm, Linear};

#[derive(Debug, Clone)]
pub struct FeedForward<S> {
    pub w1: Linear<S>,
    pub w2: Linear<S>,
    rate: f64,
    site: u64,
}

impl<S: Scalar> FeedForward<S> {
    pub fn new(scope: &str, d_model: usize, d_ff: usize, rate: f64, rng: &mut ChaCha12Rng) -> Self {
        FeedForward {
            w1: Linear::new(&format!("{scope}.w1"), d_model, d_ff, rng),
            w2: Linear::new(&format!("{scope}.w2"), d_ff, d_model, rng),
            rate,
            site: site_tag(&format!("{scope}.relu_drop")),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        ctx: DropoutCtx,
        row_offset: usize,
    ) -> Result<TensorId, TensorError> {
        let h = self.w1.forward(g, x)?;
        let h = g.relu(h)?;
        let h = dropout_site(g, h, self.rate, self.site, ctx, row_offset)?;
        self.w2.forward(g, h)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        self.w1.collect(out);
        self.w2.collect(out);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub ffn: FeedForward<S>,
    index: usize,
    rate: f64,
    attn_site: u64,
    ffn_site: u64,
}

impl<S: Scalar> EncoderLayer<S> {
    pub fn new(
        scope: &str,
        index: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        rate: f64,
        ln_eps: f64,
        ln_enabled: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(&format!("{scope}.ln1"), d_model, ln_eps, ln_enabled),
            attn: MultiHeadAttention::new(&format!("{scope}.self_attn"), d_model, heads, rng),
            ln2: LayerNorm::new(&format!("{scope}.ln2"), d_model, ln_eps, ln_enabled),
            ffn: FeedForward::new(&format!("{scope}.ffn"), d_model, d_ff, rate, rng),
            index,
            rate,
            attn_site: site_tag(&format!("{scope}.attn_drop")),
            ffn_site: site_tag(&format!("{scope}.ffn_drop")),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        ctx: DropoutCtx,
        records: &mut Vec<AttnRecord>,
    ) -> Result<TensorId, TensorError> {
        let normed = self.ln1.forward(g, x)?;
        let a = self
            .attn
            .forward(g, normed, normed, None, self.index, records)?;
        let a = dropout_site(g, a, self.rate, self.attn_site, ctx, 0)?;
        let x = g.add(x, a)?;
        let normed = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, normed, ctx, 0)?;
        let f = dropout_site(g, f, self.rate, self.ffn_site, ctx, 0)?;
        g.add(x, f)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.ffn.collect(out);
    }
}

/// Per-layer key/value rows cached across decode steps (plain values: the
/// cache is only used for no-grad inference).
#[derive(Debug, Clone, Default)]
pub struct DecoderStepCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer<S> {
    pub ln1: LayerNorm<S>,
    pub self_attn: MultiHeadAttention<S>,
    pub ln2: LayerNorm<S>,
    pub src_attn: MultiHeadAttention<S>,
    pub ln3: LayerNorm<S>,
    pub ffn: FeedForward<S>,
    index: usize,
    rate: f64,
    self_site: u64,
    src_site: u64,
    ffn_site: u64,
}

impl<S: Scalar> DecoderLayer<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &str,
        index: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        rate: f64,
        ln_eps: f64,
        ln_enabled: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(&format!("{scope}.ln1"), d_model, ln_eps, ln_enabled),
            self_attn: MultiHeadAttention::new(&format!("{scope}.self_attn"), d_model, heads, rng),
            ln2: LayerNorm::new(&format!("{scope}.ln2"), d_model, ln_eps, ln_enabled),
            src_attn: MultiHeadAttention::new(&format!("{scope}.src_attn"), d_model, heads, rng),
            ln3: LayerNorm::new(&format!("{scope}.ln3"), d_model, ln_eps, ln_enabled),
            ffn: FeedForward::new(&format!("{scope}.ffn"), d_model, d_ff, rate, rng),
            index,
            rate,
            self_site: site_tag(&format!("{scope}.self_drop")),
            src_site: site_tag(&format!("{scope}.src_drop")),
            ffn_site: site_tag(&format!("{scope}.ffn_drop")),
        }
    }

    /// Full-sequence teacher-forced pass with a causal self-attention mask.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        memory: TensorId,
        causal: Rc<Vec<bool>>,
        ctx: DropoutCtx,
        self_records: &mut Vec<AttnRecord>,
        src_records: &mut Vec<AttnRecord>,
    ) -> Result<TensorId, TensorError> {
        let normed = self.ln1.forward(g, x)?;
        let a = self.self_attn.forward(
            g,
            normed,
            normed,
            Some(causal),
            self.index,
            self_records,
        )?;
        let a = dropout_site(g, a, self.rate, self.self_site, ctx, 0)?;
        let x = g.add(x, a)?;

        let normed = self.ln2.forward(g, x)?;
        let a = self
            .src_attn
            .forward(g, normed, memory, None, self.index, src_records)?;
        let a = dropout_site(g, a, self.rate, self.src_site, ctx, 0)?;
        let x = g.add(x, a)?;

        let normed = self.ln3.forward(g, x)?;
        let f = self.ffn.forward(g, normed, ctx, 0)?;
        let f = dropout_site(g, f, self.rate, self.ffn_site, ctx, 0)?;
        g.add(x, f)
    }

    /// One-step pass with cached self-attention keys/values.
    ///
    /// `x_row` is this step's `[1 x d_model]` input, `step` its absolute
    /// index. The layer's new key/value rows are appended to `cache`.
    /// `mem_kv` holds the source keys/values already projected once per
    /// utterance. Numerically identical to row `step` of [`Self::forward`].
    #[allow(clippy::too_many_arguments)]
    pub fn forward_step(
        &self,
        g: &mut Graph<S>,
        x_row: TensorId,
        cache: &mut DecoderStepCache,
        mem_k: TensorId,
        mem_v: TensorId,
        step: usize,
        ctx: DropoutCtx,
        src_records: &mut Vec<AttnRecord>,
    ) -> Result<TensorId, TensorError> {
        let d_model = self.self_attn.d_model;
        let normed = self.ln1.forward(g, x_row)?;
        let (k_new, v_new) = self.self_attn.project_kv(g, normed)?;
        cache.k.extend(g.data(k_new).iter().map(|v| v.as_f64()));
        cache.v.extend(g.data(v_new).iter().map(|v| v.as_f64()));
        cache.steps += 1;
        let t = cache.steps;
        let k_all = g.constant(Tensor::new(
            vec![t, d_model],
            cache.k.iter().map(|&v| crate::scalar::sc(v)).collect(),
            false,
        )?)?;
        let v_all = g.constant(Tensor::new(
            vec![t, d_model],
            cache.v.iter().map(|&v| crate::scalar::sc(v)).collect(),
            false,
        )?)?;
        let mut scratch = Vec::new();
        let a = self
            .self_attn
            .attend(g, normed, k_all, v_all, None, self.index, &mut scratch)?;
        let a = dropout_site(g, a, self.rate, self.self_site, ctx, step)?;
        let x = g.add(x_row, a)?;

        let normed = self.ln2.forward(g, x)?;
        let a = self
            .src_attn
            .attend(g, normed, mem_k, mem_v, None, self.index, src_records)?;
        let a = dropout_site(g, a, self.rate, self.src_site, ctx, step)?;
        let x = g.add(x, a)?;

        let normed = self.ln3.forward(g, x)?;
        let f = self.ffn.forward(g, normed, ctx, step)?;
        let f = dropout_site(g, f, self.rate, self.ffn_site, ctx, step)?;
        g.add(x, f)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        self.ln1.collect(out);
        self.self_attn.collect(out);
        self.ln2.collect(out);
        self.src_attn.collect(out);
        self.ln3.collect(out);
        self.ffn.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attention::causal_mask;
    use crate::rng::stream;

    /// With layernorm bypassed and all sublayer output projections zeroed,
    /// a layer is the identity map.
    #[test]
    fn zero_weights_make_layers_identity() {
        let mut rng = stream(9, "layer-identity");
        let enc = EncoderLayer::<f64>::new("enc.0", 0, 8, 16, 2, 0.0, 1e-5, false, &mut rng);
        let dec = DecoderLayer::<f64>::new("dec.0", 0, 8, 16, 2, 0.0, 1e-5, false, &mut rng);
        for lin in [&enc.attn.wo, &enc.ffn.w2, &dec.self_attn.wo, &dec.src_attn.wo, &dec.ffn.w2] {
            lin.w.value_mut().data.iter_mut().for_each(|v| *v = 0.0);
            if let Some(b) = &lin.b {
                b.value_mut().data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let ctx = DropoutCtx::eval(0);
        let data: Vec<f64> = (0..24).map(|i| (i as f64) * 0.3 - 2.0).collect();

        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![3, 8], data.clone(), false).unwrap())
            .unwrap();
        let mut recs = Vec::new();
        let y = enc.forward(&mut g, x, ctx, &mut recs).unwrap();
        assert_eq!(g.data(y), data.as_slice());

        let mem: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![3, 8], data.clone(), false).unwrap())
            .unwrap();
        let m = g
            .constant(Tensor::new(vec![2, 8], mem, false).unwrap())
            .unwrap();
        let mut recs2 = Vec::new();
        let y = dec
            .forward(&mut g, x, m, causal_mask(3, 3), ctx, &mut recs, &mut recs2)
            .unwrap();
        assert_eq!(g.data(y), data.as_slice());
    }
}

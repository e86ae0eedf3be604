//! The voice-conversion / TTS model: a shared transformer decoder stack fed
//! by either a text encoder (embedding lookup) or a speech encoder (linear
//! projection of reduction-stacked frames). The two modes differ in exactly
//! one input layer and share every other parameter.

mod checkpoint;

pub use checkpoint::{Checkpoint, Stage};

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::dsp::MelSpectrogram;
use crate::nn::{
    causal_mask, AttnRecord, DecoderLayer, DecoderStepCache, DropoutCtx, EncoderLayer, LayerNorm,
    Linear, Postnet, Prenet, ScaledPositionalEncoding,
};
use crate::rng::stream;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Graph, Param, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("model is in {actual} mode but the input requires {expected} mode")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub l_enc: usize,
    pub l_dec: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Encoder reduction factor: adjacent source frames stacked together.
    pub r_e: usize,
    /// Decoder reduction factor: frames decoded per autoregressive step.
    pub r_d: usize,
    pub n_mels: usize,
    pub vocab_size: usize,
    pub prenet_dim: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub dropout: f64,
    pub prenet_dropout: f64,
    pub max_len: usize,
    pub use_layernorm: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l_enc: 3,
            l_dec: 3,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            r_e: 2,
            r_d: 2,
            n_mels: 80,
            vocab_size: 40,
            prenet_dim: 64,
            postnet_channels: 64,
            postnet_kernel: 5,
            postnet_layers: 5,
            dropout: 0.1,
            prenet_dropout: 0.5,
            max_len: 1200,
            use_layernorm: true,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.r_e < 1 || self.r_d < 1 {
            return fail(format!("reduction factors must be >= 1 (r_e={}, r_d={})", self.r_e, self.r_d));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} must be divisible by heads {}", self.d_model, self.heads));
        }
        if self.n_mels == 0 || self.vocab_size == 0 || self.l_enc == 0 || self.l_dec == 0 {
            return fail("layer counts, n_mels and vocab_size must be positive".into());
        }
        if self.postnet_kernel % 2 == 0 || self.postnet_layers < 2 {
            return fail(format!(
                "postnet kernel {} must be odd and layers {} >= 2",
                self.postnet_kernel, self.postnet_layers
            ));
        }
        for (name, r) in [("dropout", self.dropout), ("prenet_dropout", self.prenet_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{name} {r} outside [0,1)"));
            }
        }
        if self.max_len < 4 {
            return fail("max_len too small".into());
        }
        Ok(())
    }

    /// Canonical key=value text; stored inside checkpoints.
    pub fn canonical(&self) -> String {
        format!(
            "l_enc={}\nl_dec={}\nheads={}\nd_model={}\nd_ff={}\nr_e={}\nr_d={}\nn_mels={}\n\
             vocab_size={}\nprenet_dim={}\npostnet_channels={}\npostnet_kernel={}\n\
             postnet_layers={}\ndropout={}\nprenet_dropout={}\nmax_len={}\nuse_layernorm={}\nln_eps={}\n",
            self.l_enc,
            self.l_dec,
            self.heads,
            self.d_model,
            self.d_ff,
            self.r_e,
            self.r_d,
            self.n_mels,
            self.vocab_size,
            self.prenet_dim,
            self.postnet_channels,
            self.postnet_kernel,
            self.postnet_layers,
            self.dropout,
            self.prenet_dropout,
            self.max_len,
            self.use_layernorm,
            self.ln_eps
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("bad config line: {line}")))?;
            let parse_err = |e: String| ModelError::Config(format!("key {k}: {e}"));
            macro_rules! set {
                ($field:ident, $ty:ty) => {
                    cfg.$field = v.parse::<$ty>().map_err(|e| parse_err(e.to_string()))?
                };
            }
            match k {
                "l_enc" => set!(l_enc, usize),
                "l_dec" => set!(l_dec, usize),
                "heads" => set!(heads, usize),
                "d_model" => set!(d_model, usize),
                "d_ff" => set!(d_ff, usize),
                "r_e" => set!(r_e, usize),
                "r_d" => set!(r_d, usize),
                "n_mels" => set!(n_mels, usize),
                "vocab_size" => set!(vocab_size, usize),
                "prenet_dim" => set!(prenet_dim, usize),
                "postnet_channels" => set!(postnet_channels, usize),
                "postnet_kernel" => set!(postnet_kernel, usize),
                "postnet_layers" => set!(postnet_layers, usize),
                "dropout" => set!(dropout, f64),
                "prenet_dropout" => set!(prenet_dropout, f64),
                "max_len" => set!(max_len, usize),
                "use_layernorm" => set!(use_layernorm, bool),
                "ln_eps" => set!(ln_eps, f64),
                other => return Err(ModelError::Config(format!("unknown model key {other}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    Tts,
    Vc,
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Tts => "tts",
            ModelMode::Vc => "vc",
        }
    }
}

/// Stack groups of `r` consecutive rows along the feature axis, zero-padding
/// the final partial group: `[rows x cols] -> [ceil(rows/r) x r*cols]`.
/// Row-major layout makes this a reshape plus tail padding.
pub fn stack_rows<S: Scalar>(rows: usize, cols: usize, data: &[S], r: usize) -> (usize, Vec<S>) {
    assert!(r >= 1 && rows >= 1);
    let stacked = rows.div_ceil(r);
    let mut out = data.to_vec();
    out.resize(stacked * r * cols, S::zero());
    (stacked, out)
}

/// Inverse of [`stack_rows`] up to the zero padding:
/// `[stacked x r*cols] -> [stacked*r x cols]` (truncate to the original row
/// count to complete the round trip).
pub fn unstack_rows<S: Scalar>(stacked: usize, r: usize, cols: usize, data: &[S]) -> Vec<S> {
    debug_assert_eq!(data.len(), stacked * r * cols);
    data.to_vec()
}

/// Stop labels for a `frames`-frame target stacked by `r`: the step holding
/// the final true frame is the stop step.
pub fn stop_labels(frames: usize, r: usize) -> Vec<f64> {
    let steps = frames.div_ceil(r);
    let mut labels = vec![0.0; steps];
    labels[steps - 1] = 1.0;
    labels
}

/// Attention probability nodes collected during one forward pass.
#[derive(Debug, Default, Clone)]
pub struct AttnSet {
    pub enc_self: Vec<AttnRecord>,
    pub dec_self: Vec<AttnRecord>,
    pub dec_src: Vec<AttnRecord>,
}

/// Teacher-forced decoder outputs (graph node handles).
#[derive(Debug)]
pub struct TeacherForced {
    /// `[steps*r_d x n_mels]` pre-postnet prediction.
    pub coarse: TensorId,
    /// `coarse + postnet residual`, same shape.
    pub fine: TensorId,
    /// `[steps x 1]` stop logits.
    pub stop_logits: TensorId,
    pub stacked_steps: usize,
    /// True frame count of the target before stacking/padding.
    pub target_frames: usize,
    pub attn: AttnSet,
}

pub struct VtnModel<S> {
    pub config: ModelConfig,
    pub mode: ModelMode,
    input_tts: Option<Param<S>>,
    input_vc: Option<Linear<S>>,
    enc_pe: ScaledPositionalEncoding<S>,
    dec_pe: ScaledPositionalEncoding<S>,
    encoder: Vec<EncoderLayer<S>>,
    enc_final_ln: LayerNorm<S>,
    prenet: Prenet<S>,
    decoder: Vec<DecoderLayer<S>>,
    dec_final_ln: LayerNorm<S>,
    out_proj: Linear<S>,
    stop_proj: Linear<S>,
    postnet: Postnet<S>,
}

/// Parameters owned by the decoder side of the network (everything the
/// encoder-pretraining stage keeps frozen, and everything a decoder-only
/// initialization transfers).
pub fn is_decoder_side(name: &str) -> bool {
    ["prenet.", "decoder.", "dec_pe.", "out_proj.", "stop_proj.", "postnet."]
        .iter()
        .any(|p| name.starts_with(p))
}

impl<S: Scalar> VtnModel<S> {
    pub fn new(config: &ModelConfig, mode: ModelMode, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        // Shared parameters draw from one stream, the mode-specific input
        // layer from another, so both modes build bit-identical bodies from
        // the same seed.
        let mut body = stream(seed, "model.init.body");
        let mut input = stream(seed, "model.init.input");
        let c = config;
        let encoder = (0..c.l_enc)
            .map(|i| {
                EncoderLayer::new(
                    &format!("encoder.{i}"),
                    i,
                    c.d_model,
                    c.d_ff,
                    c.heads,
                    c.dropout,
                    c.ln_eps,
                    c.use_layernorm,
                    &mut body,
                )
            })
            .collect();
        let prenet = Prenet::new(
            "prenet",
            c.r_d * c.n_mels,
            c.prenet_dim,
            c.d_model,
            c.prenet_dropout,
            &mut body,
        );
        let decoder = (0..c.l_dec)
            .map(|i| {
                DecoderLayer::new(
                    &format!("decoder.{i}"),
                    i,
                    c.d_model,
                    c.d_ff,
                    c.heads,
                    c.dropout,
                    c.ln_eps,
                    c.use_layernorm,
                    &mut body,
                )
            })
            .collect();
        let out_proj = Linear::new("out_proj", c.d_model, c.r_d * c.n_mels, &mut body);
        let stop_proj = Linear::new("stop_proj", c.d_model, 1, &mut body);
        let postnet = Postnet::new(
            "postnet",
            c.n_mels,
            c.postnet_channels,
            c.postnet_kernel,
            c.postnet_layers,
            &mut body,
        );
        let (input_tts, input_vc) = match mode {
            ModelMode::Tts => {
                let table = embedding_init::<S>(c.vocab_size, c.d_model, &mut input);
                (Some(Param::new("input.tts.embed", table)), None)
            }
            ModelMode::Vc => (
                None,
                Some(Linear::new(
                    "input.vc.proj",
                    c.r_e * c.n_mels,
                    c.d_model,
                    &mut input,
                )),
            ),
        };
        Ok(VtnModel {
            config: config.clone(),
            mode,
            input_tts,
            input_vc,
            enc_pe: ScaledPositionalEncoding::new("enc_pe", c.d_model, c.max_len, c.dropout),
            dec_pe: ScaledPositionalEncoding::new("dec_pe", c.d_model, c.max_len, c.dropout),
            encoder,
            enc_final_ln: LayerNorm::new("encoder.final_ln", c.d_model, c.ln_eps, c.use_layernorm),
            prenet,
            decoder,
            dec_final_ln: LayerNorm::new("decoder.final_ln", c.d_model, c.ln_eps, c.use_layernorm),
            out_proj,
            stop_proj,
            postnet,
        })
    }

    pub fn named_params(&self) -> Vec<Param<S>> {
        let mut out = Vec::new();
        if let Some(p) = &self.input_tts {
            out.push(p.clone());
        }
        if let Some(l) = &self.input_vc {
            l.collect(&mut out);
        }
        self.enc_pe.collect(&mut out);
        self.dec_pe.collect(&mut out);
        for l in &self.encoder {
            l.collect(&mut out);
        }
        self.enc_final_ln.collect(&mut out);
        self.prenet.collect(&mut out);
        for l in &self.decoder {
            l.collect(&mut out);
        }
        self.dec_final_ln.collect(&mut out);
        self.out_proj.collect(&mut out);
        self.stop_proj.collect(&mut out);
        self.postnet.collect(&mut out);
        out
    }

    pub fn trainable_params(&self) -> Vec<Param<S>> {
        self.named_params()
            .into_iter()
            .filter(|p| p.requires_grad())
            .collect()
    }

    /// Freeze every decoder-side parameter (encoder-pretraining contract).
    pub fn freeze_decoder_side(&self) {
        for p in self.named_params() {
            if is_decoder_side(p.name()) {
                p.set_requires_grad(false);
            }
        }
    }

    pub fn unfreeze_all(&self) {
        for p in self.named_params() {
            p.set_requires_grad(true);
        }
    }

    fn require_mode(&self, expected: ModelMode) -> Result<(), ModelError> {
        if self.mode != expected {
            return Err(ModelError::ModeMismatch {
                expected: expected.as_str(),
                actual: self.mode.as_str(),
            });
        }
        Ok(())
    }

    /// Run the encoder stack over an already-embedded input.
    fn encode_common(
        &self,
        g: &mut Graph<S>,
        mut x: TensorId,
        ctx: DropoutCtx,
        attn: &mut AttnSet,
    ) -> Result<TensorId, ModelError> {
        x = self.enc_pe.forward(g, x, 0, ctx)?;
        for layer in &self.encoder {
            x = layer.forward(g, x, ctx, &mut attn.enc_self)?;
        }
        Ok(self.enc_final_ln.forward(g, x)?)
    }

    /// Speech encoder: reduction-stacked source frames through a linear
    /// projection, then the shared encoder stack. Output length is
    /// `ceil(T / r_e)`.
    pub fn encode_vc(
        &self,
        g: &mut Graph<S>,
        source: &MelSpectrogram<S>,
        ctx: DropoutCtx,
        attn: &mut AttnSet,
    ) -> Result<TensorId, ModelError> {
        self.require_mode(ModelMode::Vc)?;
        if source.frames == 0 {
            return Err(ModelError::Config("empty source mel".into()));
        }
        if source.n_mels != self.config.n_mels {
            return Err(ModelError::Config(format!(
                "source has {} mel bins, model expects {}",
                source.n_mels, self.config.n_mels
            )));
        }
        let (stacked, data) = stack_rows(source.frames, source.n_mels, &source.data, self.config.r_e);
        let x = g.constant(Tensor::new(
            vec![stacked, self.config.r_e * self.config.n_mels],
            data,
            false,
        )?)?;
        let x = self.input_vc.as_ref().unwrap().forward(g, x)?;
        self.encode_common(g, x, ctx, attn)
    }

    /// Text encoder: embedding lookup then the shared encoder stack (no
    /// encoder prenet).
    pub fn encode_tts(
        &self,
        g: &mut Graph<S>,
        symbols: &[usize],
        ctx: DropoutCtx,
        attn: &mut AttnSet,
    ) -> Result<TensorId, ModelError> {
        self.require_mode(ModelMode::Tts)?;
        if symbols.is_empty() {
            return Err(ModelError::Config("empty symbol sequence".into()));
        }
        let table = g.param(self.input_tts.as_ref().unwrap())?;
        let x = g.embed(table, symbols)?;
        self.encode_common(g, x, ctx, attn)
    }

    /// Teacher-forced decode: the target (stacked by `r_d`) is shifted right
    /// one step behind an all-zero "go" frame, so prediction of step `t`
    /// sees only targets `< t`.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph<S>,
        memory: TensorId,
        target: &MelSpectrogram<S>,
        ctx: DropoutCtx,
        mut attn: AttnSet,
    ) -> Result<TeacherForced, ModelError> {
        if target.frames == 0 {
            return Err(ModelError::Config("empty target mel".into()));
        }
        let c = &self.config;
        if target.n_mels != c.n_mels {
            return Err(ModelError::Config(format!(
                "target has {} mel bins, model expects {}",
                target.n_mels, c.n_mels
            )));
        }
        let (steps, stacked) = stack_rows(target.frames, c.n_mels, &target.data, c.r_d);
        let width = c.r_d * c.n_mels;
        // Shift right behind the zero go frame.
        let mut dec_in = vec![S::zero(); steps * width];
        dec_in[width..].copy_from_slice(&stacked[..(steps - 1) * width]);
        let x = g.constant(Tensor::new(vec![steps, width], dec_in, false)?)?;
        let x = self.prenet.forward(g, x, ctx, 0)?;
        let mut x = self.dec_pe.forward(g, x, 0, ctx)?;
        let mask = causal_mask(steps, steps);
        for layer in &self.decoder {
            x = layer.forward(
                g,
                x,
                memory,
                mask.clone(),
                ctx,
                &mut attn.dec_self,
                &mut attn.dec_src,
            )?;
        }
        let x = self.dec_final_ln.forward(g, x)?;
        let stacked_out = self.out_proj.forward(g, x)?;
        let coarse = g.reshape(stacked_out, vec![steps * c.r_d, c.n_mels])?;
        let stop_logits = self.stop_proj.forward(g, x)?;
        let residual = self.postnet.forward(g, coarse)?;
        let fine = g.add(coarse, residual)?;
        Ok(TeacherForced {
            coarse,
            fine,
            stop_logits,
            stacked_steps: steps,
            target_frames: target.frames,
            attn,
        })
    }

    /// One autoregressive step: `prev_stacked` is the previous stacked frame
    /// group (`[1 x r_d*n_mels]`, the go frame at step 0), `step` the
    /// absolute step index. Returns the new stacked coarse prediction and
    /// the stop logit. `caches` must hold one entry per decoder layer.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        g: &mut Graph<S>,
        prev_stacked: TensorId,
        step: usize,
        memory_kv: &[(TensorId, TensorId)],
        caches: &mut [DecoderStepCache],
        ctx: DropoutCtx,
        src_records: &mut Vec<AttnRecord>,
    ) -> Result<(TensorId, TensorId), ModelError> {
        let x = self.prenet.forward(g, prev_stacked, ctx, step)?;
        let mut x = self.dec_pe.forward(g, x, step, ctx)?;
        for (layer, (cache, (mem_k, mem_v))) in self
            .decoder
            .iter()
            .zip(caches.iter_mut().zip(memory_kv.iter()))
        {
            x = layer.forward_step(g, x, cache, *mem_k, *mem_v, step, ctx, src_records)?;
        }
        let x = self.dec_final_ln.forward(g, x)?;
        let coarse_row = self.out_proj.forward(g, x)?;
        let stop_logit = self.stop_proj.forward(g, x)?;
        Ok((coarse_row, stop_logit))
    }

    /// Pre-project the encoder memory once per utterance for decode steps.
    pub fn project_memory(
        &self,
        g: &mut Graph<S>,
        memory: TensorId,
    ) -> Result<Vec<(TensorId, TensorId)>, ModelError> {
        let mut out = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            out.push(layer.src_attn.project_kv(g, memory)?);
        }
        Ok(out)
    }

    /// Apply the postnet over a completed coarse sequence.
    pub fn refine(&self, g: &mut Graph<S>, coarse: TensorId) -> Result<TensorId, ModelError> {
        let residual = self.postnet.forward(g, coarse)?;
        Ok(g.add(coarse, residual)?)
    }

    pub fn decoder_layer_count(&self) -> usize {
        self.decoder.len()
    }
}

fn embedding_init<S: Scalar>(vocab: usize, d_model: usize, rng: &mut ChaCha12Rng) -> Tensor<S> {
    use rand::Rng;
    // Uniform with variance 1/d_model.
    let a = (3.0 / d_model as f64).sqrt();
    let data: Vec<S> = (0..vocab * d_model)
        .map(|_| sc::<S>(rng.gen_range(-a..a)))
        .collect();
    Tensor {
        shape: vec![vocab, d_model],
        data,
        requires_grad: true,
        grad: None,
    }
}

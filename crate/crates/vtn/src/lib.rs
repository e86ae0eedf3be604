//! Transformer-based sequence-to-sequence voice conversion with
//! text-to-speech pretraining, on a self-contained numeric stack.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — reverse-mode autodiff over dense arrays.
//! * [`dsp`] — STFT, mel filterbank, Griffin-Lim, mel cepstra, WAV I/O.
//! * [`nn`] — transformer building blocks (attention, prenet, postnet, ...).
//! * [`model`] — the voice-conversion / TTS model assembly and checkpoints.
//! * [`loss`] — masked L1, weighted stop BCE, guided attention.
//! * [`corpus`] — synthetic corpus generation, WAV ingestion, manifests.
//! * [`train`] — optimizer, schedule, and the three-stage training pipeline.
//! * [`infer`] — autoregressive decoding with cached self-attention.
//! * [`eval`] — silence-trimmed, DTW-aligned mel-cepstral distortion.
//! * [`config`] / [`cli`] — flat config schema and the `vtn` command line.
//!
//! Core math is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! pipeline and all on-disk formats use the `f64` aliases below.

pub mod corpus;
pub mod dsp;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

/// Working-precision tensor: all learnable computation runs at 64 bits.
pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type Param = tensor::Param<f64>;

/// Entry point used by the `vtn` binary.
pub fn cli_main() -> i32 {
    // Wired up once the cli module lands.
    eprintln!("vtn: command line not built yet");
    2
}

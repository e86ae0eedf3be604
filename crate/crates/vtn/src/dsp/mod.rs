//! Waveform / feature transforms: STFT analysis and synthesis, mel
//! filterbank, Griffin-Lim phase reconstruction, mel-cepstral extraction for
//! evaluation, silence trimming, and the on-disk feature formats.

mod cepstrum;
mod fft;
mod griffin_lim;
mod matio;
mod mel;
mod stft;
mod trim;
mod wav;

pub use cepstrum::{dct_rows, idct_row, mel_cepstrum, MelCepstrum};
pub use fft::{fft, ifft};
pub use griffin_lim::{griffin_lim, griffin_lim_trace};
pub use matio::{
    read_attention, read_feature, read_matrix, write_attention, write_feature, write_matrix,
    AttentionMatrix,
};
pub use mel::{extract_logmel, logmel, MelFilterbank};
pub use stft::{hann_window, istft, stft, Spectrogram};
pub use trim::{trim_silence, TrimResult};
pub use wav::{read_wav, write_wav};

use thiserror::Error;

use crate::rng::fnv1a;
use crate::scalar::Scalar;

/// Natural-log floor applied to mel energies: entries are
/// `ln(max(energy, 1e-10))`.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("{op}: {reason}")]
    InvalidArg { op: &'static str, reason: String },
    #[error("wav: {0}")]
    Wav(String),
    #[error("feature cache is stale: file hash {found:#018x} vs current config {expected:#018x}; re-extract features")]
    CacheStale { expected: u64, found: u64 },
    #[error("{0}: bad file format: {1}")]
    BadFile(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone)]
pub struct Waveform<S> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Scalar> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidArg {
                op: "waveform",
                reason: "sample rate must be positive".into(),
            });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::InvalidArg {
                op: "waveform",
                reason: "non-finite sample".into(),
            });
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|&s| s.as_f64() * s.as_f64()).sum();
        (sum / self.samples.len() as f64).sqrt()
    }
}

/// Log-mel spectrogram, row-major `[frames x n_mels]`, with the analysis
/// metadata that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<S> {
    pub frames: usize,
    pub n_mels: usize,
    pub data: Vec<S>,
    pub sample_rate: u32,
    pub hop: usize,
    pub n_fft: usize,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// Time between frame centers, in milliseconds.
    pub fn frame_shift_ms(&self) -> f64 {
        self.hop as f64 * 1000.0 / self.sample_rate as f64
    }

    /// Copy of the frame range `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> MelSpectrogram<S> {
        MelSpectrogram {
            frames: end - start,
            n_mels: self.n_mels,
            data: self.data[start * self.n_mels..end * self.n_mels].to_vec(),
            sample_rate: self.sample_rate,
            hop: self.hop,
            n_fft: self.n_fft,
        }
    }
}

/// Analysis settings shared by feature extraction and the cache format.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 80.0,
            fmax: 7600.0,
        }
    }
}

impl FeatureConfig {
    /// Canonical text form; any change to it invalidates cached features.
    pub fn canonical(&self) -> String {
        format!(
            "sample_rate={};n_fft={};hop={};n_mels={};fmin={};fmax={};floor={:e}",
            self.sample_rate, self.n_fft, self.hop, self.n_mels, self.fmin, self.fmax, LOG_FLOOR
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

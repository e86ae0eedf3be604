//! Griffin-Lim phase reconstruction from log-mel features.
//!
//! The mel frames are inverted to a linear magnitude target through the
//! filterbank pseudo-inverse, then the classic alternating projection runs
//! with a zero-phase start. Iterations work directly on frame-aligned
//! windows of an internal padded buffer, so the analysis/synthesis pair is
//! an exact least-squares projection and the magnitude inconsistency is
//! non-increasing.

use num_complex::Complex;

use crate::scalar::{sc, Scalar};

use super::fft::{fft, ifft};
use super::mel::MelFilterbank;
use super::stft::hann_window;
use super::{DspError, FeatureConfig, MelSpectrogram, Waveform};

struct FrameDomain<S> {
    frames: usize,
    bins: usize,
    n_fft: usize,
    hop: usize,
    window: Vec<S>,
    /// Precomputed overlapped window-square sum per buffer sample.
    norm: Vec<S>,
}

impl<S: Scalar> FrameDomain<S> {
    fn new(frames: usize, n_fft: usize, hop: usize) -> Self {
        let window = hann_window::<S>(n_fft);
        let total = (frames - 1) * hop + n_fft;
        let mut norm = vec![S::zero(); total];
        for t in 0..frames {
            for i in 0..n_fft {
                norm[t * hop + i] += window[i] * window[i];
            }
        }
        FrameDomain {
            frames,
            bins: n_fft / 2 + 1,
            n_fft,
            hop,
            window,
            norm,
        }
    }

    /// Least-squares signal for the given one-sided spectra.
    fn synthesize(&self, spec: &[Complex<S>]) -> Result<Vec<S>, DspError> {
        let mut signal = vec![S::zero(); self.norm.len()];
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.n_fft];
        for t in 0..self.frames {
            let row = &spec[t * self.bins..(t + 1) * self.bins];
            buf[..self.bins].copy_from_slice(row);
            for k in 1..self.n_fft / 2 {
                buf[self.n_fft - k] = row[k].conj();
            }
            ifft(&mut buf)?;
            for i in 0..self.n_fft {
                signal[t * self.hop + i] += buf[i].re * self.window[i];
            }
        }
        let eps = sc::<S>(1e-12);
        for (s, &n) in signal.iter_mut().zip(&self.norm) {
            if n > eps {
                *s /= n;
            }
        }
        Ok(signal)
    }

    fn analyze(&self, signal: &[S]) -> Result<Vec<Complex<S>>, DspError> {
        let mut spec = Vec::with_capacity(self.frames * self.bins);
        let mut buf = vec![Complex::new(S::zero(), S::zero()); self.n_fft];
        for t in 0..self.frames {
            for i in 0..self.n_fft {
                buf[i] = Complex::new(signal[t * self.hop + i] * self.window[i], S::zero());
            }
            fft(&mut buf)?;
            spec.extend_from_slice(&buf[..self.bins]);
        }
        Ok(spec)
    }
}

/// Reconstruct a waveform; see [`griffin_lim_trace`] for the per-iteration
/// inconsistency values.
pub fn griffin_lim<S: Scalar>(
    mel: &MelSpectrogram<S>,
    cfg: &FeatureConfig,
    iters: usize,
) -> Result<Waveform<S>, DspError> {
    griffin_lim_trace(mel, cfg, iters).map(|(w, _)| w)
}

/// Returns the waveform and `|| |STFT(y_k)| - M ||` (Frobenius) after every
/// iteration.
pub fn griffin_lim_trace<S: Scalar>(
    mel: &MelSpectrogram<S>,
    cfg: &FeatureConfig,
    iters: usize,
) -> Result<(Waveform<S>, Vec<f64>), DspError> {
    if iters < 1 {
        return Err(DspError::InvalidArg {
            op: "griffin_lim",
            reason: "at least one iteration required".into(),
        });
    }
    let bank = MelFilterbank::<S>::new(cfg)?;
    let domain = FrameDomain::<S>::new(mel.frames, cfg.n_fft, cfg.hop);
    // Linear magnitude target from the mel frames.
    let mut target = Vec::with_capacity(mel.frames * domain.bins);
    for t in 0..mel.frames {
        let energies: Vec<S> = mel.row(t).iter().map(|&v| v.exp()).collect();
        target.extend(bank.invert(&energies));
    }
    // Zero-phase start.
    let mut estimate: Vec<Complex<S>> = target
        .iter()
        .map(|&m| Complex::new(m, S::zero()))
        .collect();
    let mut trace = Vec::with_capacity(iters);
    let mut signal = domain.synthesize(&estimate)?;
    for _ in 0..iters {
        let rebuilt = domain.analyze(&signal)?;
        let mut inconsistency = 0.0f64;
        for (i, c) in rebuilt.iter().enumerate() {
            let mag = c.norm();
            let diff = (mag - target[i]).as_f64();
            inconsistency += diff * diff;
            // Keep the rebuilt phase, enforce the target magnitude.
            estimate[i] = if mag > S::zero() {
                Complex::new(c.re / mag * target[i], c.im / mag * target[i])
            } else {
                Complex::new(target[i], S::zero())
            };
        }
        trace.push(inconsistency.sqrt());
        signal = domain.synthesize(&estimate)?;
    }
    // Drop the analysis padding: frame t of the source features was centered
    // on sample t * hop of the original signal.
    let pad = cfg.n_fft / 2;
    let out_len = (mel.frames - 1) * cfg.hop;
    let out_len = out_len.max(1).min(signal.len() - pad);
    let samples = signal[pad..pad + out_len].to_vec();
    Ok((Waveform::new(samples, cfg.sample_rate)?, trace))
}

//! Short-time Fourier analysis and overlap-add synthesis.

use num_complex::Complex;

use crate::scalar::{sc, Scalar};

use super::fft::{fft, ifft};
use super::DspError;

/// One-sided complex spectrogram, row-major `[frames x bins]` with
/// `bins = n_fft/2 + 1`.
#[derive(Debug, Clone)]
pub struct Spectrogram<S> {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<S>>,
    pub n_fft: usize,
    pub hop: usize,
}

impl<S: Scalar> Spectrogram<S> {
    pub fn row(&self, t: usize) -> &[Complex<S>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<S> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|i| {
            let phase = sc::<S>(2.0) * S::PI() * sc::<S>(i as f64) / sc::<S>(n as f64);
            sc::<S>(0.5) - sc::<S>(0.5) * phase.cos()
        })
        .collect()
}

/// Reflect-pad index lookup: bounces `pos` (which may be negative or beyond
/// the end) back into `[0, len)` without repeating the edge sample.
fn reflect_index(pos: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut p = pos.rem_euclid(period);
    if p >= len as isize {
        p = period - p;
    }
    p as usize
}

/// Short-time Fourier transform with reflection center padding.
///
/// Frame `t` is centered on sample `t * hop`, so the frame count is
/// `len / hop + 1` independent of content.
pub fn stft<S: Scalar>(
    samples: &[S],
    n_fft: usize,
    hop: usize,
    window: &[S],
) -> Result<Spectrogram<S>, DspError> {
    if samples.is_empty() {
        return Err(DspError::InvalidArg {
            op: "stft",
            reason: "empty signal".into(),
        });
    }
    if !n_fft.is_power_of_two() {
        return Err(DspError::InvalidArg {
            op: "stft",
            reason: format!("n_fft {n_fft} is not a power of two"),
        });
    }
    if hop == 0 || window.len() != n_fft {
        return Err(DspError::InvalidArg {
            op: "stft",
            reason: format!("hop {hop} / window length {} invalid", window.len()),
        });
    }
    let len = samples.len();
    let pad = n_fft / 2;
    let frames = len / hop + 1;
    let bins = n_fft / 2 + 1;
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); n_fft];
    for t in 0..frames {
        let start = t as isize * hop as isize - pad as isize;
        for i in 0..n_fft {
            let src = reflect_index(start + i as isize, len);
            buf[i] = Complex::new(samples[src] * window[i], S::zero());
        }
        fft(&mut buf)?;
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        data,
        n_fft,
        hop,
    })
}

/// Inverse STFT by windowed overlap-add, normalized by the summed squared
/// window. `out_len` is the length of the signal to return (the original
/// sample count for a round trip).
pub fn istft<S: Scalar>(
    spec: &Spectrogram<S>,
    window: &[S],
    out_len: usize,
) -> Result<Vec<S>, DspError> {
    let n_fft = spec.n_fft;
    let hop = spec.hop;
    if window.len() != n_fft {
        return Err(DspError::InvalidArg {
            op: "istft",
            reason: "window length mismatch".into(),
        });
    }
    let pad = n_fft / 2;
    let total = (spec.frames - 1) * hop + n_fft;
    let mut acc = vec![S::zero(); total];
    let mut norm = vec![S::zero(); total];
    let mut buf = vec![Complex::new(S::zero(), S::zero()); n_fft];
    for t in 0..spec.frames {
        let row = spec.row(t);
        buf[..spec.bins].copy_from_slice(row);
        // Rebuild the negative-frequency half by Hermitian symmetry.
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = row[k].conj();
        }
        ifft(&mut buf)?;
        let off = t * hop;
        for i in 0..n_fft {
            acc[off + i] += buf[i].re * window[i];
            norm[off + i] += window[i] * window[i];
        }
    }
    let eps = sc::<S>(1e-12);
    let mut out = vec![S::zero(); out_len];
    for (i, o) in out.iter_mut().enumerate() {
        let j = i + pad;
        if j < total && norm[j] > eps {
            *o = acc[j] / norm[j];
        }
    }
    Ok(out)
}

//! Mel-cepstral coefficients for objective evaluation: orthonormal DCT-II of
//! each log-mel row, truncated, then resampled onto a 5 ms frame grid.

use crate::scalar::{sc, Scalar};

use super::{DspError, MelSpectrogram};

/// Cepstral frames, row-major `[frames x (order + 1)]`. Coefficient 0 is the
/// frame energy term; distortion metrics exclude it by default.
#[derive(Debug, Clone)]
pub struct MelCepstrum<S> {
    pub frames: usize,
    pub dims: usize,
    pub data: Vec<S>,
    pub frame_shift_ms: f64,
}

impl<S: Scalar> MelCepstrum<S> {
    pub fn row(&self, t: usize) -> &[S] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }
}

/// Orthonormal DCT-II of each row, keeping coefficients `0..=order`.
pub fn dct_rows<S: Scalar>(rows: usize, cols: usize, data: &[S], order: usize) -> Vec<S> {
    let keep = order + 1;
    let n = sc::<S>(cols as f64);
    let s0 = (S::one() / n).sqrt();
    let sk = (sc::<S>(2.0) / n).sqrt();
    let mut out = Vec::with_capacity(rows * keep);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for k in 0..keep {
            let mut acc = S::zero();
            for (i, &x) in row.iter().enumerate() {
                let ang = S::PI() * sc::<S>(k as f64) * sc::<S>(2.0 * i as f64 + 1.0)
                    / sc::<S>(2.0 * cols as f64);
                acc += x * ang.cos();
            }
            out.push(acc * if k == 0 { s0 } else { sk });
        }
    }
    out
}

/// Inverse of [`dct_rows`] for a single full-order row.
pub fn idct_row<S: Scalar>(coeffs: &[S], cols: usize) -> Vec<S> {
    let n = sc::<S>(cols as f64);
    let s0 = (S::one() / n).sqrt();
    let sk = (sc::<S>(2.0) / n).sqrt();
    (0..cols)
        .map(|i| {
            let mut acc = S::zero();
            for (k, &c) in coeffs.iter().enumerate() {
                let ang = S::PI() * sc::<S>(k as f64) * sc::<S>(2.0 * i as f64 + 1.0)
                    / sc::<S>(2.0 * cols as f64);
                acc += c * ang.cos() * if k == 0 { s0 } else { sk };
            }
            acc
        })
        .collect()
}

/// Extract order-`order` mel cepstra on a `target_shift_ms` grid (linear
/// interpolation along time from the mel hop grid).
pub fn mel_cepstrum<S: Scalar>(
    mel: &MelSpectrogram<S>,
    order: usize,
    target_shift_ms: f64,
) -> Result<MelCepstrum<S>, DspError> {
    if order + 1 > mel.n_mels {
        return Err(DspError::InvalidArg {
            op: "mel_cepstrum",
            reason: format!("order {} needs more than {} mel bins", order, mel.n_mels),
        });
    }
    if mel.frames == 0 {
        return Err(DspError::InvalidArg {
            op: "mel_cepstrum",
            reason: "empty mel spectrogram".into(),
        });
    }
    if mel.data.iter().any(|v| !v.is_finite()) {
        return Err(DspError::InvalidArg {
            op: "mel_cepstrum",
            reason: "non-finite mel value".into(),
        });
    }
    let dims = order + 1;
    let coarse = dct_rows(mel.frames, mel.n_mels, &mel.data, order);
    let src_shift = mel.frame_shift_ms();
    let last_ms = (mel.frames - 1) as f64 * src_shift;
    let out_frames = (last_ms / target_shift_ms).floor() as usize + 1;
    let mut data = Vec::with_capacity(out_frames * dims);
    for j in 0..out_frames {
        let t_ms = j as f64 * target_shift_ms;
        let pos = t_ms / src_shift;
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(mel.frames - 1);
        let frac = sc::<S>(pos - i0 as f64);
        for d in 0..dims {
            let a = coarse[i0 * dims + d];
            let b = coarse[i1 * dims + d];
            data.push(a + (b - a) * frac);
        }
    }
    Ok(MelCepstrum {
        frames: out_frames,
        dims,
        data,
        frame_shift_ms: target_shift_ms,
    })
}

//! Triangular mel filterbank, log-mel extraction, and the filterbank
//! pseudo-inverse used to seed Griffin-Lim.

use crate::scalar::{sc, Scalar};

use super::stft::{hann_window, stft, Spectrogram};
use super::{DspError, FeatureConfig, MelSpectrogram, Waveform, LOG_FLOOR};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank on FFT bin centers, mel-spaced between `fmin` and
/// `fmax`. Weights are row-major `[n_mels x bins]`.
#[derive(Debug, Clone)]
pub struct MelFilterbank<S> {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<S>,
    pinv: Vec<S>,
}

impl<S: Scalar> MelFilterbank<S> {
    pub fn new(cfg: &FeatureConfig) -> Result<Self, DspError> {
        let nyquist = cfg.sample_rate as f64 / 2.0;
        if cfg.fmax > nyquist {
            return Err(DspError::InvalidArg {
                op: "mel filterbank",
                reason: format!("fmax {} exceeds Nyquist {}", cfg.fmax, nyquist),
            });
        }
        if cfg.fmin < 0.0 || cfg.fmin >= cfg.fmax || cfg.n_mels == 0 {
            return Err(DspError::InvalidArg {
                op: "mel filterbank",
                reason: format!("bad band [{}, {}] or n_mels {}", cfg.fmin, cfg.fmax, cfg.n_mels),
            });
        }
        let bins = cfg.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
        let mut weights = vec![S::zero(); cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center));
                if w > 0.0 {
                    weights[m * bins + k] = sc::<S>(w);
                }
            }
        }
        let pinv = pseudo_inverse(&weights, cfg.n_mels, bins)?;
        Ok(MelFilterbank {
            n_mels: cfg.n_mels,
            bins,
            weights,
            pinv,
        })
    }

    /// Multiply one magnitude frame by the bank: `[bins] -> [n_mels]`.
    pub fn apply(&self, magnitudes: &[S]) -> Vec<S> {
        (0..self.n_mels)
            .map(|m| {
                let row = &self.weights[m * self.bins..(m + 1) * self.bins];
                row.iter().zip(magnitudes).map(|(&w, &x)| w * x).sum()
            })
            .collect()
    }

    /// Least-squares inversion of one mel frame back to linear magnitudes,
    /// clamped nonnegative: `[n_mels] -> [bins]`.
    pub fn invert(&self, mel: &[S]) -> Vec<S> {
        (0..self.bins)
            .map(|k| {
                let row = &self.pinv[k * self.n_mels..(k + 1) * self.n_mels];
                let v: S = row.iter().zip(mel).map(|(&w, &x)| w * x).sum();
                v.max(S::zero())
            })
            .collect()
    }
}

/// Moore-Penrose pseudo-inverse of a full-row-rank matrix `M [rows x cols]`:
/// `M+ = M^T (M M^T)^-1`, with the Gram matrix solved by Cholesky.
/// Returned row-major as `[cols x rows]`.
fn pseudo_inverse<S: Scalar>(m: &[S], rows: usize, cols: usize) -> Result<Vec<S>, DspError> {
    let mut gram = vec![S::zero(); rows * rows];
    for i in 0..rows {
        for j in i..rows {
            let s: S = (0..cols).map(|k| m[i * cols + k] * m[j * cols + k]).sum();
            gram[i * rows + j] = s;
            gram[j * rows + i] = s;
        }
    }
    let chol = cholesky(&gram, rows).ok_or_else(|| DspError::InvalidArg {
        op: "mel filterbank",
        reason: "filterbank rows are not linearly independent".into(),
    })?;
    // Solve G Y = M for Y [rows x cols]; then M+ = Y^T.
    let mut pinv = vec![S::zero(); cols * rows];
    let mut col = vec![S::zero(); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = m[r * cols + c];
        }
        let y = chol_solve(&chol, rows, &col);
        for r in 0..rows {
            pinv[c * rows + r] = y[r];
        }
    }
    Ok(pinv)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky<S: Scalar>(a: &[S], n: usize) -> Option<Vec<S>> {
    let mut l = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum = sum - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= S::zero() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn chol_solve<S: Scalar>(l: &[S], n: usize, b: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum = sum - l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![S::zero(); n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum = sum - l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Apply the filterbank to a complex spectrogram and take the floored
/// natural log of the mel energies.
pub fn logmel<S: Scalar>(
    spec: &Spectrogram<S>,
    bank: &MelFilterbank<S>,
    cfg: &FeatureConfig,
) -> Result<MelSpectrogram<S>, DspError> {
    if bank.bins != spec.bins {
        return Err(DspError::InvalidArg {
            op: "logmel",
            reason: format!("filterbank bins {} vs spectrogram bins {}", bank.bins, spec.bins),
        });
    }
    let floor = sc::<S>(LOG_FLOOR);
    let mut data = Vec::with_capacity(spec.frames * bank.n_mels);
    let mut mags = vec![S::zero(); spec.bins];
    for t in 0..spec.frames {
        for (k, c) in spec.row(t).iter().enumerate() {
            mags[k] = c.norm();
        }
        for e in bank.apply(&mags) {
            data.push(e.max(floor).ln());
        }
    }
    Ok(MelSpectrogram {
        frames: spec.frames,
        n_mels: bank.n_mels,
        data,
        sample_rate: cfg.sample_rate,
        hop: spec.hop,
        n_fft: spec.n_fft,
    })
}

/// Waveform to log-mel features in one call.
pub fn extract_logmel<S: Scalar>(
    wave: &Waveform<S>,
    cfg: &FeatureConfig,
) -> Result<MelSpectrogram<S>, DspError> {
    if wave.sample_rate != cfg.sample_rate {
        return Err(DspError::InvalidArg {
            op: "extract_logmel",
            reason: format!(
                "waveform rate {} does not match feature config {}",
                wave.sample_rate, cfg.sample_rate
            ),
        });
    }
    let win = hann_window::<S>(cfg.n_fft);
    let spec = stft(&wave.samples, cfg.n_fft, cfg.hop, &win)?;
    let bank = MelFilterbank::new(cfg)?;
    logmel(&spec, &bank, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex;
    use rand::Rng;

    fn cfg() -> FeatureConfig {
        FeatureConfig::default()
    }

    /// Independent filter construction used as the oracle: evaluates the
    /// triangle for a single (mel, bin) pair straight from the edge formula.
    fn oracle_weight(cfg: &FeatureConfig, m: usize, k: usize) -> f64 {
        let lo_m = 2595.0 * (1.0 + cfg.fmin / 700.0).log10();
        let hi_m = 2595.0 * (1.0 + cfg.fmax / 700.0).log10();
        let edge = |i: usize| {
            let mel = lo_m + (hi_m - lo_m) * i as f64 / (cfg.n_mels + 1) as f64;
            700.0 * (10f64.powf(mel / 2595.0) - 1.0)
        };
        let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
        let (a, b, c) = (edge(m), edge(m + 1), edge(m + 2));
        (((f - a) / (b - a)).min((c - f) / (c - b))).max(0.0)
    }

    #[test]
    fn filter_rows_match_independent_construction_and_have_positive_area() {
        let cfg = cfg();
        let bank = MelFilterbank::<f64>::new(&cfg).unwrap();
        for m in 0..cfg.n_mels {
            let mut area = 0.0;
            for k in 0..bank.bins {
                let w = bank.weights[m * bank.bins + k];
                let o = oracle_weight(&cfg, m, k);
                assert!((w - o).abs() < 1e-12, "filter {m} bin {k}: {w} vs {o}");
                area += w;
            }
            assert!(area > 0.0, "filter {m} has zero area");
        }
    }

    #[test]
    fn all_zero_spectrogram_hits_the_log_floor() {
        let cfg = cfg();
        let spec = Spectrogram {
            frames: 3,
            bins: cfg.n_fft / 2 + 1,
            data: vec![Complex::new(0.0f64, 0.0); 3 * (cfg.n_fft / 2 + 1)],
            n_fft: cfg.n_fft,
            hop: cfg.hop,
        };
        let bank = MelFilterbank::new(&cfg).unwrap();
        let mel = logmel(&spec, &bank, &cfg).unwrap();
        for &v in &mel.data {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn flat_magnitude_matches_matrix_product_oracle() {
        let cfg = cfg();
        let bank = MelFilterbank::<f64>::new(&cfg).unwrap();
        let mags = vec![0.7f64; bank.bins];
        let applied = bank.apply(&mags);
        for m in 0..cfg.n_mels {
            let oracle: f64 = (0..bank.bins)
                .map(|k| bank.weights[m * bank.bins + k] * 0.7)
                .sum();
            assert!((applied[m] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_inverse_round_trip_in_row_space() {
        let cfg = cfg();
        let bank = MelFilterbank::<f64>::new(&cfg).unwrap();
        let mut rng = crate::rng::stream(17, "pinv");
        let spectrum: Vec<f64> = (0..bank.bins).map(|_| rng.gen_range(0.0..2.0)).collect();
        let mel = bank.apply(&spectrum);
        let recovered = bank.invert(&mel);
        let mel2 = bank.apply(&recovered);
        for (a, b) in mel.iter().zip(&mel2) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fmax_above_nyquist_rejected() {
        let mut c = cfg();
        c.fmax = 9000.0;
        assert!(MelFilterbank::<f64>::new(&c).is_err());
    }
}

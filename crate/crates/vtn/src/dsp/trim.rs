//! Leading/trailing silence detection on log-mel frames.
//!
//! A frame's log energy is the mean of its mel row (natural-log units); a
//! frame is silent when it falls more than `threshold_db` below the peak
//! frame. Only the largest leading and trailing silent runs are removed.

use crate::scalar::Scalar;

use super::MelSpectrogram;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrimResult {
    /// Frame range to keep, `[start, end)`. Empty when everything is silent.
    pub start: usize,
    pub end: usize,
    /// Warning condition: no frame reached the threshold.
    pub all_silent: bool,
}

impl TrimResult {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub fn trim_silence<S: Scalar>(mel: &MelSpectrogram<S>, threshold_db: f64) -> TrimResult {
    let energies: Vec<f64> = (0..mel.frames)
        .map(|t| {
            let row = mel.row(t);
            row.iter().map(|v| v.as_f64()).sum::<f64>() / mel.n_mels as f64
        })
        .collect();
    let peak = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // X dB of energy corresponds to X * ln(10)/10 in natural-log units.
    let threshold = peak - threshold_db * std::f64::consts::LN_10 / 10.0;
    let first = energies.iter().position(|&e| e >= threshold);
    match first {
        None => TrimResult {
            start: 0,
            end: 0,
            all_silent: true,
        },
        Some(start) => {
            let end = energies.iter().rposition(|&e| e >= threshold).unwrap() + 1;
            TrimResult {
                start,
                end,
                all_silent: false,
            }
        }
    }
}

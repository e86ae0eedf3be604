//! Minimal RIFF/WAVE reader and writer: PCM 16-bit, mono, little-endian.

use std::fs;
use std::path::Path;

use crate::scalar::{sc, Scalar};

use super::{DspError, Waveform};

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a 16-bit mono PCM WAV file. When `expected_rate` is given, any other
/// sample rate is rejected.
pub fn read_wav<S: Scalar>(
    path: &Path,
    expected_rate: Option<u32>,
) -> Result<Waveform<S>, DspError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(DspError::Wav(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(&bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(DspError::Wav(format!(
                "{}: truncated chunk {:?}",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(DspError::Wav(format!("{}: short fmt chunk", path.display())));
                }
                fmt = Some((
                    u16_at(&bytes, body_start),
                    u16_at(&bytes, body_start + 2),
                    u32_at(&bytes, body_start + 4),
                    u16_at(&bytes, body_start + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt
        .ok_or_else(|| DspError::Wav(format!("{}: missing fmt chunk", path.display())))?;
    if format != 1 || bits != 16 {
        return Err(DspError::Wav(format!(
            "{}: only 16-bit PCM is supported (format {format}, {bits} bits)",
            path.display()
        )));
    }
    if channels != 1 {
        return Err(DspError::Wav(format!(
            "{}: only mono is supported ({channels} channels)",
            path.display()
        )));
    }
    if let Some(expected) = expected_rate {
        if rate != expected {
            return Err(DspError::Wav(format!(
                "{}: sample rate {rate} Hz but this pipeline requires {expected} Hz; resample first",
                path.display()
            )));
        }
    }
    let raw = data
        .ok_or_else(|| DspError::Wav(format!("{}: missing data chunk", path.display())))?;
    let scale = sc::<S>(1.0 / 32768.0);
    let samples: Vec<S> = raw
        .chunks_exact(2)
        .map(|c| sc::<S>(i16::from_le_bytes([c[0], c[1]]) as f64) * scale)
        .collect();
    Waveform::new(samples, rate)
}

/// Write a 16-bit mono PCM WAV file; samples are clamped to [-1, 1].
pub fn write_wav<S: Scalar>(path: &Path, wave: &Waveform<S>) -> Result<(), DspError> {
    let n = wave.samples.len();
    let data_len = n * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &wave.samples {
        // Inverse of the read scaling (s = i / 32768) so a round trip is
        // sample-exact once quantized.
        let v = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_sample_exact_after_quantization() {
        let dir = std::env::temp_dir().join("vtn_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("tone.wav");
        let samples: Vec<f64> = (0..2000)
            .map(|i| (i as f64 * 0.05).sin() * 0.8)
            .collect();
        let wave = Waveform::new(samples, 16_000).unwrap();
        write_wav(&path, &wave).unwrap();
        let back: Waveform<f64> = read_wav(&path, Some(16_000)).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples.len(), wave.samples.len());
        // Second round trip hits the identical quantized values.
        write_wav(&path, &back).unwrap();
        let again: Waveform<f64> = read_wav(&path, Some(16_000)).unwrap();
        assert_eq!(back.samples, again.samples);
    }

    #[test]
    fn wrong_rate_rejected_with_clear_message() {
        let dir = std::env::temp_dir().join("vtn_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rate8k.wav");
        let wave = Waveform::new(vec![0.0f64; 100], 8_000).unwrap();
        write_wav(&path, &wave).unwrap();
        let err = read_wav::<f64>(&path, Some(16_000)).unwrap_err().to_string();
        assert!(err.contains("8000") && err.contains("16000"), "{err}");
    }

    #[test]
    fn garbage_rejected() {
        let dir = std::env::temp_dir().join("vtn_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav::<f64>(&path, None).is_err());
    }
}

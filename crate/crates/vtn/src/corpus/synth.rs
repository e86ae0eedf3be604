//! Deterministic synthetic parallel-speaker corpus, generated directly in
//! log-mel space.
//!
//! Every speaker renders the same symbol sequences. A symbol's spectral
//! identity is a shared set of Gaussian bumps over mel bins; speakers differ
//! by a global mel-bin shift of those bumps and a duration scale, so
//! conversion between two speakers requires both spectral mapping and length
//! modification. Silence padding sits at the log-mel floor.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::dsp::{write_feature, FeatureConfig, MelSpectrogram, LOG_FLOOR};
use crate::rng::{counter_unit, fnv1a, mix2, stream};

use super::{CorpusError, Manifest, ManifestEntry};

/// Per-speaker rendering parameters. The spectral templates and base
/// durations are derived from the corpus seed (shared linguistic identity);
/// the shift and scale make the voice.
#[derive(Debug, Clone)]
pub struct SyntheticSpeaker {
    pub id: String,
    /// Additive mel-bin displacement of every spectral bump.
    pub formant_shift: f64,
    /// Multiplier on symbol durations (>= values stretch speech).
    pub duration_scale: f64,
}

impl SyntheticSpeaker {
    pub fn new(id: impl Into<String>, formant_shift: f64, duration_scale: f64) -> Self {
        SyntheticSpeaker {
            id: id.into(),
            formant_shift,
            duration_scale,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisParams {
    pub n_utts: usize,
    pub symbols_min: usize,
    pub symbols_max: usize,
    /// At least 5 distinct symbols keep attention from degenerating.
    pub alphabet_size: usize,
    pub silence_min: usize,
    pub silence_max: usize,
    pub noise_amp: f64,
    pub seed: u64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            n_utts: 40,
            symbols_min: 4,
            symbols_max: 8,
            alphabet_size: 10,
            silence_min: 2,
            silence_max: 5,
            noise_amp: 0.05,
            seed: 1,
        }
    }
}

/// Shared per-symbol spectral identity: Gaussian bump (center, width,
/// amplitude) triples over mel bins, plus a base duration in frames.
struct SymbolTemplate {
    bumps: Vec<(f64, f64, f64)>,
    base_duration: usize,
}

const VOICED_FLOOR: f64 = -10.0;

fn build_templates(params: &SynthesisParams, n_mels: usize) -> Vec<SymbolTemplate> {
    let mut rng = stream(params.seed, "corpus.templates");
    (0..params.alphabet_size)
        .map(|_| {
            let bumps = (0..3)
                .map(|_| {
                    let center = rng.gen_range(6.0..(n_mels as f64 - 7.0));
                    let width = rng.gen_range(3.0..8.0);
                    let amp = rng.gen_range(5.0..9.0);
                    (center, width, amp)
                })
                .collect();
            let base_duration = rng.gen_range(3..=6);
            SymbolTemplate {
                bumps,
                base_duration,
            }
        })
        .collect()
}

fn render_frame(
    template: &SymbolTemplate,
    speaker: &SyntheticSpeaker,
    n_mels: usize,
    noise_key: u64,
    frame_idx: u64,
    noise_amp: f64,
) -> Vec<f64> {
    (0..n_mels)
        .map(|m| {
            let mut v = VOICED_FLOOR;
            for &(center, width, amp) in &template.bumps {
                let c = (center + speaker.formant_shift).clamp(1.0, n_mels as f64 - 2.0);
                let d = m as f64 - c;
                v += amp * (-d * d / (2.0 * width * width)).exp();
            }
            v + (counter_unit(noise_key, frame_idx * n_mels as u64 + m as u64) * 2.0 - 1.0)
                * noise_amp
        })
        .collect()
}

/// Generate the corpus: every speaker renders every utterance; features are
/// written straight to the cache format (no waveform round trip). Returns a
/// manifest whose entries are grouped per speaker in utterance order.
pub fn generate_corpus(
    speakers: &[SyntheticSpeaker],
    params: &SynthesisParams,
    cfg: &FeatureConfig,
    out_dir: &Path,
) -> Result<Manifest, CorpusError> {
    if speakers.is_empty() {
        return Err(CorpusError::Invalid("no speakers given".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for s in speakers {
        if !names.insert(&s.id) {
            return Err(CorpusError::Invalid(format!("duplicate speaker id {}", s.id)));
        }
    }
    if params.symbols_min == 0 || params.symbols_min > params.symbols_max {
        return Err(CorpusError::Invalid("bad symbols_per_utt range".into()));
    }
    if params.alphabet_size == 0 {
        return Err(CorpusError::Invalid("empty alphabet".into()));
    }
    let templates = build_templates(params, cfg.n_mels);
    // Shared symbol sequences: the linguistic content of the parallel corpus.
    let mut text_rng = stream(params.seed, "corpus.texts");
    let texts: Vec<Vec<usize>> = (0..params.n_utts)
        .map(|_| {
            let len = text_rng.gen_range(params.symbols_min..=params.symbols_max);
            (0..len)
                .map(|_| text_rng.gen_range(0..params.alphabet_size))
                .collect()
        })
        .collect();

    let mut manifest = Manifest::new(cfg, out_dir.to_path_buf());
    let silence = LOG_FLOOR.ln();
    for speaker in speakers {
        let spk_tag = fnv1a(speaker.id.as_bytes());
        let feat_dir = out_dir.join("feats").join(&speaker.id);
        fs::create_dir_all(&feat_dir)?;
        for (utt_idx, symbols) in texts.iter().enumerate() {
            let utt_id = format!("utt{utt_idx:04}");
            // Timing randomness (silence lengths, duration jitter) is keyed
            // by the utterance alone, so speakers at the same duration scale
            // stay frame-aligned; spectral noise is speaker-keyed.
            let time_key = mix2(params.seed, utt_idx as u64);
            let utt_key = mix2(mix2(params.seed, spk_tag), utt_idx as u64);
            let lead = params.silence_min
                + (mix2(time_key, 1) as usize % (params.silence_max - params.silence_min + 1));
            let trail = params.silence_min
                + (mix2(time_key, 2) as usize % (params.silence_max - params.silence_min + 1));
            let mut rows: Vec<f64> = Vec::new();
            let mut frames = 0usize;
            let push_silence = |rows: &mut Vec<f64>, frames: &mut usize, n: usize, tag: u64| {
                for k in 0..n {
                    for m in 0..cfg.n_mels {
                        let jitter = (counter_unit(mix2(utt_key, tag), (k * cfg.n_mels + m) as u64)
                            * 2.0
                            - 1.0)
                            * 0.01;
                        rows.push(silence + jitter.min(0.0));
                    }
                    *frames += 1;
                }
            };
            push_silence(&mut rows, &mut frames, lead, 3);
            for (pos, &sym) in symbols.iter().enumerate() {
                let template = &templates[sym];
                let scaled =
                    (template.base_duration as f64 * speaker.duration_scale).round() as isize;
                let jitter = (mix2(time_key, 100 + pos as u64) % 3) as isize - 1;
                let duration = (scaled + jitter).max(2) as usize;
                let noise_key = mix2(utt_key, 1000 + pos as u64);
                for k in 0..duration {
                    rows.extend(render_frame(
                        template,
                        speaker,
                        cfg.n_mels,
                        noise_key,
                        k as u64,
                        params.noise_amp,
                    ));
                    frames += 1;
                }
            }
            push_silence(&mut rows, &mut frames, trail, 4);
            let mel = MelSpectrogram {
                frames,
                n_mels: cfg.n_mels,
                data: rows,
                sample_rate: cfg.sample_rate,
                hop: cfg.hop,
                n_fft: cfg.n_fft,
            };
            let rel = Path::new("feats").join(&speaker.id).join(format!("{utt_id}.vtnf"));
            write_feature(&out_dir.join(&rel), &mel, cfg)?;
            manifest.entries.push(ManifestEntry {
                utt_id,
                speaker: speaker.id.clone(),
                symbols: symbols.clone(),
                path: rel,
                frames,
            });
        }
    }
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

//! Ingest a directory of 16 kHz mono WAV recordings with a transcript file
//! into cached features plus a manifest.
//!
//! Transcript lines are `utterance_id<TAB>text`; text is tokenized at the
//! character level against a vocabulary built from the transcript itself
//! (sorted unique characters) unless a vocabulary file is supplied.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::dsp::{extract_logmel, read_wav, write_feature, FeatureConfig};

use super::{CorpusError, Manifest, ManifestEntry};

#[derive(Debug, Default)]
pub struct IngestReport {
    pub ingested: usize,
    /// Utterances skipped with the reason, e.g. a WAV without a transcript
    /// line.
    pub warnings: Vec<String>,
    /// Character vocabulary in id order.
    pub vocab: Vec<char>,
}

fn load_vocab(path: &Path) -> Result<Vec<char>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut vocab = Vec::new();
    for line in text.lines() {
        let mut chars = line.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => vocab.push(c),
            _ => {
                return Err(CorpusError::Invalid(format!(
                    "vocab file {}: each line must hold exactly one character, got {line:?}",
                    path.display()
                )))
            }
        }
    }
    Ok(vocab)
}

pub fn ingest_wav_corpus(
    wav_dir: &Path,
    transcript: &Path,
    speaker: &str,
    cfg: &FeatureConfig,
    vocab_file: Option<&Path>,
    out_dir: &Path,
) -> Result<(Manifest, IngestReport), CorpusError> {
    let text = fs::read_to_string(transcript)?;
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, words)) => pairs.push((id.trim().to_string(), words.to_string())),
            None => {
                return Err(CorpusError::Invalid(format!(
                    "{} line {}: expected utt_id<TAB>text",
                    transcript.display(),
                    i + 1
                )))
            }
        }
    }
    let vocab: Vec<char> = match vocab_file {
        Some(p) => load_vocab(p)?,
        None => {
            let chars: BTreeSet<char> = pairs.iter().flat_map(|(_, t)| t.chars()).collect();
            chars.into_iter().collect()
        }
    };
    let index_of = |c: char| vocab.iter().position(|&v| v == c);

    let mut report = IngestReport {
        vocab: vocab.clone(),
        ..IngestReport::default()
    };
    let mut manifest = Manifest::new(cfg, out_dir.to_path_buf());
    let feat_rel = Path::new("feats").join(speaker);
    fs::create_dir_all(out_dir.join(&feat_rel))?;

    let transcript_ids: BTreeSet<&str> = pairs.iter().map(|(id, _)| id.as_str()).collect();
    // WAVs without a transcript line are skipped with a warning.
    let mut wav_files: Vec<String> = Vec::new();
    for entry in fs::read_dir(wav_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".wav") {
            if transcript_ids.contains(stem) {
                wav_files.push(stem.to_string());
            } else {
                report
                    .warnings
                    .push(format!("{name}: no transcript line, skipped"));
            }
        }
    }

    for (utt_id, words) in &pairs {
        if !wav_files.contains(utt_id) {
            report
                .warnings
                .push(format!("{utt_id}: transcript has no {utt_id}.wav, skipped"));
            continue;
        }
        let mut symbols = Vec::with_capacity(words.chars().count());
        let mut bad_char = None;
        for c in words.chars() {
            match index_of(c) {
                Some(i) => symbols.push(i),
                None => {
                    bad_char = Some(c);
                    break;
                }
            }
        }
        if let Some(c) = bad_char {
            report
                .warnings
                .push(format!("{utt_id}: character {c:?} not in vocabulary, skipped"));
            continue;
        }
        let wave = read_wav::<f64>(&wav_dir.join(format!("{utt_id}.wav")), Some(cfg.sample_rate))?;
        let mel = extract_logmel(&wave, cfg)?;
        let rel = feat_rel.join(format!("{utt_id}.vtnf"));
        write_feature(&out_dir.join(&rel), &mel, cfg)?;
        manifest.entries.push(ManifestEntry {
            utt_id: utt_id.clone(),
            speaker: speaker.to_string(),
            symbols,
            path: rel,
            frames: mel.frames,
        });
        report.ingested += 1;
    }
    manifest.save(&out_dir.join("manifest.txt"))?;
    let vocab_out: String = vocab.iter().map(|c| format!("{c}\n")).collect();
    fs::write(out_dir.join("vocab.txt"), vocab_out)?;
    Ok((manifest, report))
}

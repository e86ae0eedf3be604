//! Data layer: manifests over cached feature files, deterministic synthetic
//! corpus generation, corpus splitting, and WAV-directory ingestion.

mod ingest;
mod synth;

pub use ingest::{ingest_wav_corpus, IngestReport};
pub use synth::{generate_corpus, SynthesisParams, SyntheticSpeaker};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dsp::{read_feature, DspError, FeatureConfig, MelSpectrogram};
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest {0}: {1}")]
    BadManifest(PathBuf, String),
    #[error("corpus: {0}")]
    Invalid(String),
    #[error(
        "split of {available} utterances cannot supply train={train} val={val} eval={eval}"
    )]
    Oversubscribed {
        available: usize,
        train: usize,
        val: usize,
        eval: usize,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker: String,
    pub symbols: Vec<usize>,
    /// Feature file path relative to the manifest location.
    pub path: PathBuf,
    pub frames: usize,
}

/// Line-delimited corpus index. Header lines carry the feature metadata the
/// entries were extracted with; entry order is generation order.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub sample_rate: u32,
    pub feature_hash: u64,
    pub n_mels: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(cfg: &FeatureConfig, root: PathBuf) -> Self {
        Manifest {
            sample_rate: cfg.sample_rate,
            feature_hash: cfg.hash(),
            n_mels: cfg.n_mels,
            entries: Vec::new(),
            root,
        }
    }

    /// Distinct speakers in first-appearance order.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            if seen.insert(e.speaker.clone()) {
                out.push(e.speaker.clone());
            }
        }
        out
    }

    pub fn for_speaker(&self, speaker: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.speaker == speaker).collect()
    }

    /// Utterance ids in first-appearance order.
    pub fn utterance_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            if seen.insert(e.utt_id.clone()) {
                out.push(e.utt_id.clone());
            }
        }
        out
    }

    pub fn entry(&self, utt_id: &str, speaker: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.utt_id == utt_id && e.speaker == speaker)
    }

    /// Load an entry's cached features, validating the cache hash against
    /// `cfg`.
    pub fn load_features(
        &self,
        entry: &ManifestEntry,
        cfg: &FeatureConfig,
    ) -> Result<MelSpectrogram<f64>, CorpusError> {
        Ok(read_feature(&self.root.join(&entry.path), cfg)?)
    }

    /// Check that every speaker covers the same utterance ids in the same
    /// order (parallel-corpus contract).
    pub fn check_parallel(&self) -> Result<(), CorpusError> {
        let speakers = self.speakers();
        if speakers.len() < 2 {
            return Ok(());
        }
        let reference: Vec<&str> = self
            .for_speaker(&speakers[0])
            .iter()
            .map(|e| e.utt_id.as_str())
            .collect();
        for spk in &speakers[1..] {
            let ids: Vec<&str> = self.for_speaker(spk).iter().map(|e| e.utt_id.as_str()).collect();
            if ids != reference {
                return Err(CorpusError::Invalid(format!(
                    "speaker {spk} does not cover the same utterances as {}",
                    speakers[0]
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        out.push_str("#vtn-manifest v1\n");
        out.push_str(&format!("#sample_rate {}\n", self.sample_rate));
        out.push_str(&format!("#feature_hash {:#018x}\n", self.feature_hash));
        out.push_str(&format!("#n_mels {}\n", self.n_mels));
        for e in &self.entries {
            let symbols = e
                .symbols
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.utt_id,
                e.speaker,
                symbols,
                e.path.display(),
                e.frames
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        let bad = |msg: String| CorpusError::BadManifest(path.to_path_buf(), msg);
        let mut lines = text.lines();
        match lines.next() {
            Some("#vtn-manifest v1") => {}
            other => return Err(bad(format!("bad header line {other:?}"))),
        }
        let mut sample_rate = None;
        let mut feature_hash = None;
        let mut n_mels = None;
        let mut entries = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("bad metadata line {line:?}")))?;
                match k {
                    "sample_rate" => sample_rate = Some(v.parse().map_err(|_| bad(format!("bad sample_rate {v}")))?),
                    "feature_hash" => {
                        let v = v.trim_start_matches("0x");
                        feature_hash = Some(
                            u64::from_str_radix(v, 16)
                                .map_err(|_| bad(format!("bad feature_hash {v}")))?,
                        );
                    }
                    "n_mels" => n_mels = Some(v.parse().map_err(|_| bad(format!("bad n_mels {v}")))?),
                    other => return Err(bad(format!("unknown metadata key {other}"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields: {line:?}")));
            }
            let symbols = if fields[2].is_empty() {
                Vec::new()
            } else {
                fields[2]
                    .split(' ')
                    .map(|s| s.parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(format!("bad symbol list {:?}", fields[2])))?
            };
            entries.push(ManifestEntry {
                utt_id: fields[0].to_string(),
                speaker: fields[1].to_string(),
                symbols,
                path: PathBuf::from(fields[3]),
                frames: fields[4]
                    .parse()
                    .map_err(|_| bad(format!("bad frame count {:?}", fields[4])))?,
            });
        }
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !ids.insert((e.utt_id.clone(), e.speaker.clone())) {
                return Err(bad(format!("duplicate entry {} / {}", e.utt_id, e.speaker)));
            }
        }
        Ok(Manifest {
            sample_rate: sample_rate.ok_or_else(|| bad("missing sample_rate".into()))?,
            feature_hash: feature_hash.ok_or_else(|| bad("missing feature_hash".into()))?,
            n_mels: n_mels.ok_or_else(|| bad("missing n_mels".into()))?,
            entries,
            root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }
}

/// Seed-deterministic, parallel-consistent split into train/validation/eval
/// manifests. Utterance ids are shuffled as a unit, so every speaker's copy
/// of an utterance lands in the same split.
pub fn split(
    manifest: &Manifest,
    n_train: usize,
    n_val: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Manifest, Manifest, Manifest), CorpusError> {
    let ids = manifest.utterance_ids();
    if n_train + n_val + n_eval > ids.len() {
        return Err(CorpusError::Oversubscribed {
            available: ids.len(),
            train: n_train,
            val: n_val,
            eval: n_eval,
        });
    }
    let mut shuffled = ids.clone();
    let mut rng = stream(seed, "corpus.split");
    shuffled.shuffle(&mut rng);
    let train_set: BTreeSet<&String> = shuffled[..n_train].iter().collect();
    let val_set: BTreeSet<&String> = shuffled[n_train..n_train + n_val].iter().collect();
    let eval_set: BTreeSet<&String> =
        shuffled[n_train + n_val..n_train + n_val + n_eval].iter().collect();
    let pick = |set: &BTreeSet<&String>| Manifest {
        sample_rate: manifest.sample_rate,
        feature_hash: manifest.feature_hash,
        n_mels: manifest.n_mels,
        entries: manifest
            .entries
            .iter()
            .filter(|e| set.contains(&e.utt_id))
            .cloned()
            .collect(),
        root: manifest.root.clone(),
    };
    Ok((pick(&train_set), pick(&val_set), pick(&eval_set)))
}

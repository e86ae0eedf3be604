//! Three-stage training pipeline: decoder pretraining via TTS, encoder
//! pretraining as an autoencoder against the frozen decoder, and
//! voice-conversion fine-tuning initialized from the pretrained parameters.
//!
//! Training is bit-reproducible: batch composition and dropout masks are
//! pure functions of `(seed, step)`, so a run resumed from serialized state
//! continues exactly where the uninterrupted run would be.

mod optim;
mod state;

pub use optim::{noam_lr, Adam};
pub use state::TrainState;

use std::time::Instant;

use thiserror::Error;

use crate::corpus::{CorpusError, Manifest};
use crate::dsp::{FeatureConfig, MelSpectrogram};
use crate::loss::{combine, LossBreakdown, LossError, LossWeights};
use crate::model::{
    stop_labels, AttnSet, Checkpoint, ModelConfig, ModelError, ModelMode, Stage, VtnModel,
};
use crate::nn::DropoutCtx;
use crate::rng::{fnv1a, mix2, stream};
use crate::tensor::TensorError;
use crate::{Graph, Param};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training: {0}")]
    Invalid(String),
    #[error("training rejected a step: non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("stage mismatch: expected a {expected} checkpoint, found {found}")]
    StageMismatch {
        expected: &'static str,
        found: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub clip_norm: f64,
    pub grad_accum: usize,
    pub seed: u64,
    pub val_interval: u64,
    pub log_interval: u64,
    /// Early stopping after this many validations without improvement;
    /// 0 disables it.
    pub early_stop_patience: u32,
    /// When set, the outcome records the first step whose validation loss
    /// reached this value.
    pub val_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            max_steps: 1000,
            warmup_steps: 200,
            lr_scale: 1.0,
            clip_norm: 1.0,
            grad_accum: 1,
            seed: 1,
            val_interval: 100,
            log_interval: 10,
            early_stop_patience: 10,
            val_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps < 1 {
            return Err(TrainError::Invalid("warmup must be >= 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(TrainError::Invalid("clip norm must be positive".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_steps == 0 {
            return Err(TrainError::Invalid(
                "batch size, accumulation steps and max steps must be positive".into(),
            ));
        }
        if self.val_interval == 0 || self.log_interval == 0 {
            return Err(TrainError::Invalid("intervals must be positive".into()));
        }
        Ok(())
    }
}

/// One (text, speech) pair for TTS training.
#[derive(Debug, Clone)]
pub struct TtsItem {
    pub symbols: Vec<usize>,
    pub mel: MelSpectrogram<f64>,
}

/// One parallel (source speech, target speech) pair for VC training.
#[derive(Debug, Clone)]
pub struct VcItem {
    pub source: MelSpectrogram<f64>,
    pub target: MelSpectrogram<f64>,
}

pub fn load_tts_items(
    manifest: &Manifest,
    speaker: &str,
    cfg: &FeatureConfig,
) -> Result<Vec<TtsItem>, TrainError> {
    let mut items = Vec::new();
    for e in manifest.for_speaker(speaker) {
        items.push(TtsItem {
            symbols: e.symbols.clone(),
            mel: manifest.load_features(e, cfg)?,
        });
    }
    Ok(items)
}

pub fn load_mel_items(
    manifest: &Manifest,
    speaker: &str,
    cfg: &FeatureConfig,
) -> Result<Vec<MelSpectrogram<f64>>, TrainError> {
    let mut items = Vec::new();
    for e in manifest.for_speaker(speaker) {
        items.push(manifest.load_features(e, cfg)?);
    }
    Ok(items)
}

/// Pair source and target entries by utterance id. Length-mismatched (non
/// parallel) manifests are rejected.
pub fn load_vc_items(
    manifest: &Manifest,
    source: &str,
    target: &str,
    cfg: &FeatureConfig,
) -> Result<Vec<VcItem>, TrainError> {
    let src = manifest.for_speaker(source);
    let trg = manifest.for_speaker(target);
    if src.is_empty() || src.len() != trg.len() {
        return Err(TrainError::Invalid(format!(
            "speakers {source} ({}) and {target} ({}) do not form a parallel corpus",
            src.len(),
            trg.len()
        )));
    }
    let mut items = Vec::new();
    for (s, t) in src.iter().zip(&trg) {
        if s.utt_id != t.utt_id {
            return Err(TrainError::Invalid(format!(
                "utterance order mismatch: {} vs {}",
                s.utt_id, t.utt_id
            )));
        }
        items.push(VcItem {
            source: manifest.load_features(s, cfg)?,
            target: manifest.load_features(t, cfg)?,
        });
    }
    Ok(items)
}

/// Everything a finished stage hands back.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub state: TrainState,
    /// Line-delimited log records (step records and validation records).
    pub log: Vec<String>,
    /// Mean total training loss per step, index 0 = step 1.
    pub step_losses: Vec<f64>,
    pub best_val: f64,
    pub final_val: f64,
    /// First step whose validation loss reached `val_threshold`.
    pub steps_to_threshold: Option<u64>,
}

/// Resume point: the serialized state plus the matching parameter snapshot.
pub struct ResumePoint {
    pub state: TrainState,
    pub params: Checkpoint,
}

enum ItemRef<'a> {
    Tts(&'a TtsItem),
    Ae(&'a MelSpectrogram<f64>),
    Vc(&'a VcItem),
}

struct StageSpec<'a> {
    model: &'a VtnModel<f64>,
    items: Vec<ItemRef<'a>>,
    val_items: Vec<ItemRef<'a>>,
    weights: &'a LossWeights,
}

/// Index of the training item used at global sample counter `k`: epoch-wise
/// deterministic shuffling, stateless in the step counter.
fn sample_index(seed: u64, k: u64, n: usize) -> usize {
    let epoch = k / n as u64;
    let pos = (k % n as u64) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = stream(mix2(seed, epoch), "train.epoch");
    perm.shuffle(&mut rng);
    perm[pos]
}

fn validation_key(seed: u64, idx: usize) -> u64 {
    mix2(mix2(seed, fnv1a(b"validation")), idx as u64)
}

fn run_stage(
    spec: StageSpec<'_>,
    cfg: &TrainConfig,
    stage: Stage,
    lineage: &[Stage],
    resume: Option<&TrainState>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if spec.items.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let model = spec.model;
    let params = model.named_params();
    let trainable: Vec<Param> = params.iter().filter(|p| p.requires_grad()).cloned().collect();
    let mut adam = Adam::new(&params);
    let mut start_step = 0u64;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0u32;
    if let Some(state) = resume {
        state.restore_optimizer(&mut adam)?;
        start_step = state.step;
        best_val = state.best_val;
        since_best = state.validations_since_best;
    }

    let n = spec.items.len();
    let micro_scale = 1.0 / (cfg.batch_size * cfg.grad_accum) as f64;
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut steps_to_threshold = None;
    let mut final_val = f64::NAN;
    let started = Instant::now();

    let validate = |step: u64| -> Result<f64, TrainError> {
        if spec.val_items.is_empty() {
            return Ok(f64::NAN);
        }
        let mut sum = 0.0;
        for (vi, item) in spec.val_items.iter().enumerate() {
            let mut g = Graph::new();
            let ctx = DropoutCtx::eval(validation_key(cfg.seed, vi));
            let (nodes, _) = forward_item(model, &mut g, item, ctx, spec.weights)?;
            sum += g.scalar_value(nodes.l1_fine);
        }
        let _ = step;
        Ok(sum / spec.val_items.len() as f64)
    };

    let mut stop_early = false;
    let mut step = start_step;
    while step < cfg.max_steps && !stop_early {
        step += 1;
        let ctx = DropoutCtx::train_step(cfg.seed, step);
        Adam::zero_grads(&trainable);
        let mut batch_break = LossBreakdown {
            l1_coarse: 0.0,
            l1_fine: 0.0,
            stop_bce: 0.0,
            guided_attention: 0.0,
            total: 0.0,
            ga_empty_selection: false,
        };
        let samples = (cfg.batch_size * cfg.grad_accum) as u64;
        for j in 0..samples {
            let k = (step - 1) * samples + j;
            let idx = sample_index(cfg.seed, k, n);
            let mut g = Graph::new();
            let (nodes, _) = forward_item(model, &mut g, &spec.items[idx], ctx, spec.weights)?;
            let b = nodes.breakdown(&g);
            batch_break.l1_coarse += b.l1_coarse;
            batch_break.l1_fine += b.l1_fine;
            batch_break.stop_bce += b.stop_bce;
            batch_break.guided_attention += b.guided_attention;
            batch_break.total += b.total;
            let scaled = g.scale(nodes.total, micro_scale)?;
            g.backward(scaled)?;
        }
        for v in [
            &mut batch_break.l1_coarse,
            &mut batch_break.l1_fine,
            &mut batch_break.stop_bce,
            &mut batch_break.guided_attention,
            &mut batch_break.total,
        ] {
            *v /= samples as f64;
        }
        step_losses.push(batch_break.total);

        let lr = noam_lr(step, cfg.warmup_steps, model.config.d_model, cfg.lr_scale)?;
        let grad_norm = match adam.step(&params, lr, cfg.clip_norm) {
            Ok(norm) => norm,
            Err(TrainError::NonFiniteGradient { param }) => {
                log.push(format!(
                    "step={step} event=skipped reason=non-finite-gradient param={param}"
                ));
                Adam::zero_grads(&trainable);
                continue;
            }
            Err(other) => return Err(other),
        };

        if step % cfg.log_interval == 0 || step == cfg.max_steps {
            log.push(format!(
                "step={step} lr={lr:.6e} l1_coarse={:.6e} l1_fine={:.6e} stop={:.6e} ga={:.6e} total={:.6e} gnorm={grad_norm:.6e} wall_ms={}",
                batch_break.l1_coarse,
                batch_break.l1_fine,
                batch_break.stop_bce,
                batch_break.guided_attention,
                batch_break.total,
                started.elapsed().as_millis()
            ));
        }
        if step % cfg.val_interval == 0 || step == cfg.max_steps {
            let val = validate(step)?;
            final_val = val;
            if val.is_finite() {
                if steps_to_threshold.is_none() {
                    if let Some(thr) = cfg.val_threshold {
                        if val <= thr {
                            steps_to_threshold = Some(step);
                        }
                    }
                }
                if val < best_val {
                    best_val = val;
                    since_best = 0;
                    best_params = Some(
                        params
                            .iter()
                            .map(|p| p.value().data.clone())
                            .collect(),
                    );
                } else {
                    since_best += 1;
                    if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                        stop_early = true;
                    }
                }
            }
            log.push(format!(
                "step={step} val_l1={val:.6e} best={best_val:.6e} since_best={since_best} wall_ms={}",
                started.elapsed().as_millis()
            ));
        }
    }

    // With early stopping active, hand back the best-validation parameters.
    if cfg.early_stop_patience > 0 {
        if let Some(best) = best_params {
            for (p, data) in params.iter().zip(best) {
                p.value_mut().data = data;
            }
        }
    }
    let state = TrainState::capture(step, cfg.seed, best_val, since_best, &adam);
    let checkpoint = Checkpoint::from_model(model, stage, lineage, step);
    Ok(TrainOutcome {
        checkpoint,
        state,
        log,
        step_losses,
        best_val,
        final_val,
        steps_to_threshold,
    })
}

fn forward_item(
    model: &VtnModel<f64>,
    g: &mut Graph,
    item: &ItemRef<'_>,
    ctx: DropoutCtx,
    weights: &LossWeights,
) -> Result<(crate::loss::LossNodes, usize), TrainError> {
    let mut attn = AttnSet::default();
    let (memory, target) = match item {
        ItemRef::Tts(it) => (model.encode_tts(g, &it.symbols, ctx, &mut attn)?, &it.mel),
        ItemRef::Ae(mel) => (model.encode_vc(g, mel, ctx, &mut attn)?, *mel),
        ItemRef::Vc(it) => (model.encode_vc(g, &it.source, ctx, &mut attn)?, &it.target),
    };
    let out = model.decode_teacher_forced(g, memory, target, ctx, attn)?;
    let labels = stop_labels(target.frames, model.config.r_d);
    let nodes = combine(
        g,
        out.coarse,
        out.fine,
        out.stop_logits,
        &target.data,
        target.frames,
        &labels,
        &out.attn.dec_src,
        weights,
    )?;
    Ok((nodes, out.stacked_steps))
}

/// Stage 1: decoder pretraining — train a full TTS model on (text, speech)
/// pairs from the TTS speaker.
pub fn pretrain_decoder(
    items: &[TtsItem],
    val_items: &[TtsItem],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    resume: Option<&ResumePoint>,
) -> Result<(VtnModel<f64>, TrainOutcome), TrainError> {
    let model = VtnModel::new(model_cfg, ModelMode::Tts, cfg.seed)?;
    if let Some(r) = resume {
        r.params.restore_into(&model)?;
    }
    let spec = StageSpec {
        model: &model,
        items: items.iter().map(ItemRef::Tts).collect(),
        val_items: val_items.iter().map(ItemRef::Tts).collect(),
        weights,
    };
    let outcome = run_stage(spec, cfg, Stage::Tts, &[], resume.map(|r| &r.state))?;
    Ok((model, outcome))
}

/// Stage 2: encoder pretraining — an autoencoder on the TTS speaker's
/// speech whose decoder (and postnet, stop head, prenet) is the pretrained
/// one, kept fixed; only the speech encoder side trains.
pub fn pretrain_encoder(
    items: &[MelSpectrogram<f64>],
    val_items: &[MelSpectrogram<f64>],
    decoder_ckpt: &Checkpoint,
    cfg: &TrainConfig,
    weights: &LossWeights,
    resume: Option<&ResumePoint>,
) -> Result<(VtnModel<f64>, TrainOutcome), TrainError> {
    if decoder_ckpt.stage != Stage::Tts {
        return Err(TrainError::StageMismatch {
            expected: "tts",
            found: decoder_ckpt.stage.to_string(),
        });
    }
    let model_cfg = ModelConfig::from_canonical(&decoder_ckpt.config_text)?;
    let model = VtnModel::new(&model_cfg, ModelMode::Vc, cfg.seed)?;
    // The speech encoder is new; only decoder-side parameters transfer.
    decoder_ckpt.restore_decoder_side(&model)?;
    if let Some(r) = resume {
        r.params.restore_into(&model)?;
    }
    model.freeze_decoder_side();
    let spec = StageSpec {
        model: &model,
        items: items.iter().map(ItemRef::Ae).collect(),
        val_items: val_items.iter().map(ItemRef::Ae).collect(),
        weights,
    };
    let outcome = run_stage(
        spec,
        cfg,
        Stage::EncoderPretrain,
        &decoder_ckpt.lineage,
        resume.map(|r| &r.state),
    )?;
    model.unfreeze_all();
    Ok((model, outcome))
}

/// Initialization modes for VC fine-tuning, mirroring the pretraining
/// ablation rows: nothing, decoder only, or encoder + decoder.
pub enum VcInit<'a> {
    Scratch,
    DecoderOnly(&'a Checkpoint),
    Full(&'a Checkpoint),
}

/// Stage 3: fine-tune the full model on the parallel conversion corpus.
pub fn finetune_vc(
    items: &[VcItem],
    val_items: &[VcItem],
    init: VcInit<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
    resume: Option<&ResumePoint>,
) -> Result<(VtnModel<f64>, TrainOutcome), TrainError> {
    let model = VtnModel::new(model_cfg, ModelMode::Vc, cfg.seed)?;
    let lineage: Vec<Stage> = match &init {
        VcInit::Scratch => Vec::new(),
        VcInit::DecoderOnly(ckpt) => {
            if ckpt.stage != Stage::Tts {
                return Err(TrainError::StageMismatch {
                    expected: "tts",
                    found: ckpt.stage.to_string(),
                });
            }
            ckpt.restore_decoder_side(&model)?;
            ckpt.lineage.clone()
        }
        VcInit::Full(ckpt) => {
            if ckpt.stage != Stage::EncoderPretrain {
                return Err(TrainError::StageMismatch {
                    expected: "encoder-pretrain",
                    found: ckpt.stage.to_string(),
                });
            }
            if ckpt.lineage != vec![Stage::Tts, Stage::EncoderPretrain] {
                return Err(TrainError::Invalid(format!(
                    "checkpoint lineage {:?} is not the documented tts -> encoder-pretrain path",
                    ckpt.lineage
                )));
            }
            ckpt.restore_into(&model)?;
            ckpt.lineage.clone()
        }
    };
    if let Some(r) = resume {
        r.params.restore_into(&model)?;
    }
    model.unfreeze_all();
    let spec = StageSpec {
        model: &model,
        items: items.iter().map(ItemRef::Vc).collect(),
        val_items: val_items.iter().map(ItemRef::Vc).collect(),
        weights,
    };
    let outcome = run_stage(spec, cfg, Stage::Vc, &lineage, resume.map(|r| &r.state))?;
    Ok((model, outcome))
}

#[cfg(test)]
mod tests;

use super::*;
use crate::corpus::{generate_corpus, SynthesisParams, SyntheticSpeaker};
use crate::dsp::FeatureConfig;

fn small_feature_cfg() -> FeatureConfig {
    FeatureConfig {
        n_mels: 16,
        ..FeatureConfig::default()
    }
}

fn small_model_cfg() -> ModelConfig {
    ModelConfig {
        l_enc: 1,
        l_dec: 1,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        r_e: 2,
        r_d: 2,
        n_mels: 16,
        vocab_size: 10,
        prenet_dim: 16,
        postnet_channels: 8,
        postnet_kernel: 5,
        postnet_layers: 5,
        dropout: 0.05,
        prenet_dropout: 0.2,
        max_len: 256,
        use_layernorm: true,
        ln_eps: 1e-5,
    }
}

fn quick_train_cfg(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        max_steps: steps,
        warmup_steps: 20,
        lr_scale: 1.0,
        clip_norm: 1.0,
        grad_accum: 1,
        seed,
        val_interval: 10,
        log_interval: 5,
        early_stop_patience: 0,
        val_threshold: None,
    }
}

fn tiny_corpus(dir: &std::path::Path) -> (Vec<TtsItem>, Vec<MelSpectrogram<f64>>, Vec<VcItem>) {
    let cfg = small_feature_cfg();
    let speakers = vec![
        SyntheticSpeaker::new("tts", 0.0, 1.0),
        SyntheticSpeaker::new("src", -2.0, 0.9),
        SyntheticSpeaker::new("trg", 2.0, 1.2),
    ];
    let params = SynthesisParams {
        n_utts: 6,
        symbols_min: 2,
        symbols_max: 4,
        alphabet_size: 8,
        seed: 3,
        ..SynthesisParams::default()
    };
    let manifest = generate_corpus(&speakers, &params, &cfg, dir).unwrap();
    let tts = load_tts_items(&manifest, "tts", &cfg).unwrap();
    let mels = load_mel_items(&manifest, "tts", &cfg).unwrap();
    let vc = load_vc_items(&manifest, "src", "trg", &cfg).unwrap();
    (tts, mels, vc)
}

fn tmp(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join("vtn_train_tests").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn loss_decreases_and_stages_chain() {
    let dir = tmp("chain");
    let (tts, mels, vc) = tiny_corpus(&dir);
    let mcfg = small_model_cfg();
    let weights = LossWeights::default();

    let (_, tts_out) = pretrain_decoder(
        &tts,
        &tts[..2],
        &mcfg,
        &quick_train_cfg(40, 5),
        &weights,
        None,
    )
    .unwrap();
    assert_eq!(tts_out.checkpoint.stage, Stage::Tts);
    assert_eq!(tts_out.checkpoint.lineage, vec![Stage::Tts]);
    let early: f64 = tts_out.step_losses[..5].iter().sum::<f64>() / 5.0;
    let late: f64 = tts_out.step_losses[35..].iter().sum::<f64>() / 5.0;
    assert!(late < early, "training loss should fall: {early} -> {late}");

    let (_, enc_out) = pretrain_encoder(
        &mels,
        &mels[..2],
        &tts_out.checkpoint,
        &quick_train_cfg(30, 6),
        &weights,
        None,
    )
    .unwrap();
    assert_eq!(enc_out.checkpoint.stage, Stage::EncoderPretrain);
    assert_eq!(
        enc_out.checkpoint.lineage,
        vec![Stage::Tts, Stage::EncoderPretrain]
    );

    let (_, vc_out) = finetune_vc(
        &vc,
        &vc[..2],
        VcInit::Full(&enc_out.checkpoint),
        &mcfg,
        &quick_train_cfg(30, 7),
        &weights,
        None,
    )
    .unwrap();
    assert_eq!(vc_out.checkpoint.stage, Stage::Vc);
    assert_eq!(
        vc_out.checkpoint.lineage,
        vec![Stage::Tts, Stage::EncoderPretrain, Stage::Vc]
    );
}

#[test]
fn frozen_decoder_bytes_identical_through_encoder_pretraining() {
    let dir = tmp("frozen");
    let (tts, mels, _) = tiny_corpus(&dir);
    let weights = LossWeights::default();
    let (_, tts_out) = pretrain_decoder(
        &tts,
        &[],
        &small_model_cfg(),
        &quick_train_cfg(20, 9),
        &weights,
        None,
    )
    .unwrap();
    let (_, enc_out) = pretrain_encoder(
        &mels,
        &[],
        &tts_out.checkpoint,
        &quick_train_cfg(25, 10),
        &weights,
        None,
    )
    .unwrap();
    let before: std::collections::HashMap<&str, &Vec<f64>> = tts_out
        .checkpoint
        .params
        .iter()
        .map(|(n, _, d)| (n.as_str(), d))
        .collect();
    let mut compared = 0;
    let mut encoder_changed = false;
    for (name, _, after) in &enc_out.checkpoint.params {
        if crate::model::is_decoder_side(name) {
            let b = before[name.as_str()];
            for (x, y) in after.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "frozen parameter {name} changed");
            }
            compared += 1;
        } else if let Some(b) = before.get(name.as_str()) {
            if after.iter().zip(b.iter()).any(|(x, y)| x != y) {
                encoder_changed = true;
            }
        } else {
            // The fresh vc input projection only exists in the new model.
            encoder_changed = true;
        }
    }
    assert!(compared > 10);
    assert!(encoder_changed, "the encoder side must actually train");
}

#[test]
fn reconstruction_improves_on_held_out_after_encoder_pretraining() {
    let dir = tmp("recon");
    let (tts, mels, _) = tiny_corpus(&dir);
    let weights = LossWeights::default();
    let (_, tts_out) = pretrain_decoder(
        &tts,
        &[],
        &small_model_cfg(),
        &quick_train_cfg(30, 11),
        &weights,
        None,
    )
    .unwrap();
    let held_out = &mels[4..6];
    let train_set = &mels[..4];

    // Validation loss of the autoencoder at initialization vs after training.
    let eval_recon = |ckpt: &Checkpoint, trained: bool| -> f64 {
        let model_cfg = ModelConfig::from_canonical(&ckpt.config_text).unwrap();
        let model = VtnModel::new(&model_cfg, ModelMode::Vc, 12).unwrap();
        if trained {
            ckpt.restore_into(&model).unwrap();
        } else {
            ckpt.restore_decoder_side(&model).unwrap();
        }
        let mut sum = 0.0;
        for (i, mel) in held_out.iter().enumerate() {
            let mut g = Graph::new();
            let ctx = DropoutCtx::eval(validation_key(12, i));
            let (nodes, _) = forward_item(&model, &mut g, &ItemRef::Ae(mel), ctx, &weights).unwrap();
            sum += g.scalar_value(nodes.l1_fine);
        }
        sum / held_out.len() as f64
    };
    let before = eval_recon(&tts_out.checkpoint, false);
    let (_, enc_out) = pretrain_encoder(
        train_set,
        &[],
        &tts_out.checkpoint,
        &quick_train_cfg(60, 12),
        &weights,
        None,
    )
    .unwrap();
    let after = eval_recon(&enc_out.checkpoint, true);
    assert!(
        after < before,
        "held-out reconstruction must improve: {before} -> {after}"
    );
}

#[test]
fn resume_is_bit_identical_to_uninterrupted_run() {
    let dir = tmp("resume");
    let (tts, _, _) = tiny_corpus(&dir);
    let weights = LossWeights::default();
    let mcfg = small_model_cfg();

    let full_cfg = quick_train_cfg(24, 21);
    let (_, full) = pretrain_decoder(&tts, &tts[..1], &mcfg, &full_cfg, &weights, None).unwrap();

    let mut half_cfg = full_cfg.clone();
    half_cfg.max_steps = 12;
    let (_, first) = pretrain_decoder(&tts, &tts[..1], &mcfg, &half_cfg, &weights, None).unwrap();
    let resume = ResumePoint {
        state: first.state,
        params: first.checkpoint,
    };
    let (_, second) =
        pretrain_decoder(&tts, &tts[..1], &mcfg, &full_cfg, &weights, Some(&resume)).unwrap();

    assert_eq!(second.checkpoint.step, full.checkpoint.step);
    for ((n1, _, d1), (n2, _, d2)) in full
        .checkpoint
        .params
        .iter()
        .zip(&second.checkpoint.params)
    {
        assert_eq!(n1, n2);
        for (a, b) in d1.iter().zip(d2) {
            assert_eq!(a.to_bits(), b.to_bits(), "param {n1} diverged after resume");
        }
    }
    // Loss trajectory of the resumed half matches the tail of the full run.
    assert_eq!(first.step_losses.len(), 12);
    for (i, (a, b)) in full.step_losses[12..]
        .iter()
        .zip(&second.step_losses)
        .enumerate()
    {
        assert_eq!(a.to_bits(), b.to_bits(), "step {} loss diverged", 13 + i);
    }
}

#[test]
fn same_seed_reproduces_bit_identical_checkpoints_and_logs() {
    let dir = tmp("determinism");
    let (tts, _, _) = tiny_corpus(&dir);
    let weights = LossWeights::default();
    let mcfg = small_model_cfg();
    let cfg = quick_train_cfg(15, 33);
    let strip_wall = |log: &[String]| -> Vec<String> {
        log.iter()
            .map(|l| l.rsplit_once(" wall_ms=").map(|(a, _)| a.to_string()).unwrap_or_else(|| l.clone()))
            .collect()
    };
    let (_, a) = pretrain_decoder(&tts, &tts[..1], &mcfg, &cfg, &weights, None).unwrap();
    let (_, b) = pretrain_decoder(&tts, &tts[..1], &mcfg, &cfg, &weights, None).unwrap();
    for ((_, _, d1), (_, _, d2)) in a.checkpoint.params.iter().zip(&b.checkpoint.params) {
        for (x, y) in d1.iter().zip(d2) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    assert_eq!(strip_wall(&a.log), strip_wall(&b.log));

    let mut other = cfg.clone();
    other.seed = 34;
    let (_, c) = pretrain_decoder(&tts, &tts[..1], &mcfg, &other, &weights, None).unwrap();
    assert_ne!(
        a.checkpoint.params[0].2, c.checkpoint.params[0].2,
        "different seeds must differ"
    );
}

#[test]
fn validation_is_deterministic_across_repeats() {
    let dir = tmp("valdet");
    let (tts, _, _) = tiny_corpus(&dir);
    let weights = LossWeights::default();
    let model = VtnModel::new(&small_model_cfg(), ModelMode::Tts, 3).unwrap();
    let eval_once = || -> f64 {
        let mut sum = 0.0;
        for (i, item) in tts[..3].iter().enumerate() {
            let mut g = Graph::new();
            let ctx = DropoutCtx::eval(validation_key(3, i));
            let (nodes, _) = forward_item(&model, &mut g, &ItemRef::Tts(item), ctx, &weights).unwrap();
            sum += g.scalar_value(nodes.l1_fine);
        }
        sum
    };
    assert_eq!(eval_once().to_bits(), eval_once().to_bits());
}

#[test]
fn empty_corpus_and_bad_stage_rejected() {
    let weights = LossWeights::default();
    let mcfg = small_model_cfg();
    let err = pretrain_decoder(&[], &[], &mcfg, &quick_train_cfg(5, 1), &weights, None)
        .err()
        .unwrap();
    assert!(matches!(err, TrainError::EmptyCorpus));

    let dir = tmp("badstage");
    let (_, mels, vc) = tiny_corpus(&dir);
    let model = VtnModel::<f64>::new(&mcfg, ModelMode::Vc, 1).unwrap();
    let vc_ckpt = Checkpoint::from_model(&model, Stage::Vc, &[], 0);
    let err = pretrain_encoder(&mels, &[], &vc_ckpt, &quick_train_cfg(5, 1), &weights, None)
        .err()
        .unwrap();
    assert!(matches!(err, TrainError::StageMismatch { .. }));
    let err = finetune_vc(
        &vc,
        &[],
        VcInit::Full(&vc_ckpt),
        &mcfg,
        &quick_train_cfg(5, 1),
        &weights,
        None,
    )
    .err()
    .unwrap();
    assert!(matches!(err, TrainError::StageMismatch { .. }));
}

#[test]
fn non_parallel_corpus_rejected() {
    let dir = tmp("nonparallel");
    let cfg = small_feature_cfg();
    let speakers = vec![
        SyntheticSpeaker::new("a", 0.0, 1.0),
        SyntheticSpeaker::new("b", 1.0, 1.0),
    ];
    let params = SynthesisParams {
        n_utts: 4,
        seed: 5,
        ..SynthesisParams::default()
    };
    let mut manifest = generate_corpus(&speakers, &params, &cfg, &dir).unwrap();
    manifest.entries.retain(|e| !(e.speaker == "b" && e.utt_id == "utt0001"));
    assert!(load_vc_items(&manifest, "a", "b", &cfg).is_err());
}

use vtn::dsp::{FeatureConfig, MelSpectrogram};
use vtn::model::*;
use vtn::nn::DropoutCtx;
use vtn::tensor::max_relative_error;

fn mel_of(frames: usize, n_mels: usize, fill: impl Fn(usize, usize) -> f64) -> MelSpectrogram<f64> {
    let fc = FeatureConfig::default();
    let mut data = Vec::with_capacity(frames * n_mels);
    for t in 0..frames { for m in 0..n_mels { data.push(fill(t, m)); } }
    MelSpectrogram { frames, n_mels, data, sample_rate: fc.sample_rate, hop: fc.hop, n_fft: fc.n_fft }
}

fn main() {
    let cfg = ModelConfig {
        l_enc: 1, l_dec: 1, heads: 2, d_model: 8, d_ff: 16, r_e: 2, r_d: 4,
        n_mels: 6, vocab_size: 5, prenet_dim: 8, postnet_channels: 4,
        postnet_kernel: 3, postnet_layers: 5, dropout: 0.0, prenet_dropout: 0.0,
        max_len: 128, use_layernorm: true, ln_eps: 1e-5,
    };
    let model = VtnModel::<f64>::new(&cfg, ModelMode::Vc, 5).unwrap();
    let src = mel_of(6, cfg.n_mels, |t, m| ((t + m) % 5) as f64 * 0.1);
    let base = mel_of(9, cfg.n_mels, |t, m| ((t * 3 + m) % 7) as f64 * 0.1);
    let run = |target: &MelSpectrogram<f64>| {
        let mut g = vtn::Graph::new();
        let mut attn = AttnSet::default();
        let h = model.encode_vc(&mut g, &src, DropoutCtx::eval(77), &mut attn).unwrap();
        let out = model.decode_teacher_forced(&mut g, h, target, DropoutCtx::eval(77), attn).unwrap();
        g.data(out.coarse).to_vec()
    };
    let baseline = run(&base);
    let mut changed = base.clone();
    changed.data[4 * cfg.n_mels + 1] += 2.5;
    let pert = run(&changed);
    for fr in 0..12 {
        let diff: f64 = (0..6).map(|m| (baseline[fr*6+m] - pert[fr*6+m]).abs()).sum();
        println!("coarse frame {fr}: abs diff {diff:.6}");
    }

    // Per-param gradcheck on the VC model.
    let cfg2 = ModelConfig { r_d: 2, ..cfg.clone() };
    let model = VtnModel::<f64>::new(&cfg2, ModelMode::Vc, 6).unwrap();
    let src = mel_of(4, cfg2.n_mels, |t, m| ((t + 2 * m) % 5) as f64 * 0.15 - 0.2);
    let tgt = mel_of(5, cfg2.n_mels, |t, m| ((2 * t + m) % 6) as f64 * 0.12 - 0.3);
    for p in model.named_params() {
        let err = max_relative_error(
            std::slice::from_ref(&p),
            |g| {
                let mut attn = AttnSet::default();
                let h = model.encode_vc(g, &src, DropoutCtx::eval(0), &mut attn).unwrap();
                let out = model.decode_teacher_forced(g, h, &tgt, DropoutCtx::eval(0), attn).unwrap();
                let shape = g.shape(out.fine).to_vec();
                let n: usize = shape.iter().product();
                let w: Vec<f64> = (0..n).map(|i| vtn::rng::counter_unit(22, i as u64) * 2.0 - 1.0).collect();
                let c = g.constant(vtn::Tensor::new(shape, w, false)?)?;
                let m = g.mul(out.fine, c)?;
                g.sum_all(m)
            },
            1e-5,
        ).unwrap();
        if err > 1e-4 {
            println!("{:45} err {:.3e}", p.name(), err);
        }
    }
}

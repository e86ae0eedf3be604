//! Training objectives: masked L1 on coarse and refined mel predictions,
//! class-weighted stop-token BCE, and the guided attention penalty that
//! pulls decoder-to-encoder attention toward the diagonal band.

use thiserror::Error;

use crate::nn::AttnRecord;
use crate::scalar::{sc, Scalar};
use crate::tensor::{Graph, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("masked_l1: no valid positions (lengths {valid} of {rows})")]
    NoValidPositions { valid: usize, rows: usize },
    #[error("{0}")]
    Tensor(#[from] TensorError),
}

/// Term weights and hyperparameters for the combined objective.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub l1_coarse: f64,
    pub l1_fine: f64,
    pub stop: f64,
    pub guided_attention: f64,
    pub stop_pos_weight: f64,
    /// Width `g` of the diagonal band in the guided-attention weight.
    pub ga_sigma: f64,
    /// Decoder layers (0-based) whose source attention is penalized.
    pub ga_layers: Vec<usize>,
    /// Heads to penalize; empty means all heads.
    pub ga_heads: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1_coarse: 1.0,
            l1_fine: 1.0,
            stop: 1.0,
            guided_attention: 1.0,
            stop_pos_weight: 5.0,
            ga_sigma: 0.4,
            ga_layers: vec![0, 1],
            ga_heads: Vec::new(),
        }
    }
}

/// Scalar values of each term plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1_coarse: f64,
    pub l1_fine: f64,
    pub stop_bce: f64,
    pub guided_attention: f64,
    pub total: f64,
    /// Set when the guided-attention selection matched nothing.
    pub ga_empty_selection: bool,
}

/// Graph handles for the loss terms; values are read back after forward.
pub struct LossNodes {
    pub l1_coarse: TensorId,
    pub l1_fine: TensorId,
    pub stop_bce: TensorId,
    pub guided_attention: TensorId,
    pub total: TensorId,
    pub ga_empty_selection: bool,
}

/// Mean absolute error over the first `valid_rows` rows only; padding rows
/// contribute exactly zero weight.
pub fn masked_l1<S: Scalar>(
    g: &mut Graph<S>,
    pred: TensorId,
    target: &[S],
    valid_rows: usize,
) -> Result<TensorId, LossError> {
    let shape = g.shape(pred).to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    if valid_rows == 0 || valid_rows > rows {
        return Err(LossError::NoValidPositions {
            valid: valid_rows,
            rows,
        });
    }
    if target.len() < valid_rows * cols {
        return Err(LossError::Tensor(TensorError::InvalidAttr {
            op: "masked_l1",
            reason: format!(
                "target has {} values, need at least {}",
                target.len(),
                valid_rows * cols
            ),
        }));
    }
    // Target padded to the prediction shape; the weight mask zeroes the tail.
    let mut padded = vec![S::zero(); rows * cols];
    padded[..valid_rows * cols].copy_from_slice(&target[..valid_rows * cols]);
    let t = g.constant(Tensor::new(shape.clone(), padded, false)?)?;
    let inv = sc::<S>(1.0 / (valid_rows * cols) as f64);
    let mut weights = vec![S::zero(); rows * cols];
    weights[..valid_rows * cols].iter_mut().for_each(|w| *w = inv);
    let w = g.constant(Tensor::new(shape, weights, false)?)?;
    let diff = g.sub(pred, t)?;
    let a = g.abs(diff)?;
    let weighted = g.mul(a, w)?;
    Ok(g.sum_all(weighted)?)
}

/// Mean weighted binary cross-entropy over the stop logits.
pub fn stop_bce<S: Scalar>(
    g: &mut Graph<S>,
    logits: TensorId,
    labels: &[f64],
    pos_weight: f64,
) -> Result<TensorId, LossError> {
    let per_step = g.bce_with_logits(logits, labels, pos_weight)?;
    Ok(g.mean_all(per_step)?)
}

/// The diagonal-band weight `1 - exp(-(n/N - t/T)^2 / (2 g^2))`.
pub fn guided_attention_weights(rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(rows * cols);
    for n in 0..rows {
        for t in 0..cols {
            let d = n as f64 / rows as f64 - t as f64 / cols as f64;
            w.push(1.0 - (-d * d / (2.0 * sigma * sigma)).exp());
        }
    }
    w
}

/// Mean over the selected heads of the mean elementwise product between the
/// attention matrix and the diagonal-band weight. An empty selection yields
/// a constant zero and sets the warning flag.
pub fn guided_attention_loss<S: Scalar>(
    g: &mut Graph<S>,
    records: &[AttnRecord],
    weights: &LossWeights,
) -> Result<(TensorId, bool), LossError> {
    let selected: Vec<&AttnRecord> = records
        .iter()
        .filter(|r| {
            weights.ga_layers.contains(&r.layer)
                && (weights.ga_heads.is_empty() || weights.ga_heads.contains(&r.head))
        })
        .collect();
    if selected.is_empty() {
        let zero = g.constant(Tensor::scalar(S::zero()))?;
        return Ok((zero, true));
    }
    let mut terms = Vec::with_capacity(selected.len());
    for rec in &selected {
        let w = guided_attention_weights(rec.rows, rec.cols, weights.ga_sigma)
            .into_iter()
            .map(sc::<S>)
            .collect();
        let wc = g.constant(Tensor::new(vec![rec.rows, rec.cols], w, false)?)?;
        let prod = g.mul(rec.node, wc)?;
        terms.push(g.mean_all(prod)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    let mean = g.scale(acc, sc::<S>(1.0 / terms.len() as f64))?;
    Ok((mean, false))
}

/// Assemble the combined objective for one teacher-forced pass.
pub fn combine<S: Scalar>(
    g: &mut Graph<S>,
    coarse: TensorId,
    fine: TensorId,
    stop_logits: TensorId,
    target: &[S],
    target_frames: usize,
    stop_labels: &[f64],
    src_attention: &[AttnRecord],
    weights: &LossWeights,
) -> Result<LossNodes, LossError> {
    let l1_coarse = masked_l1(g, coarse, target, target_frames)?;
    let l1_fine = masked_l1(g, fine, target, target_frames)?;
    let stop = stop_bce(g, stop_logits, stop_labels, weights.stop_pos_weight)?;
    let (ga, ga_empty) = guided_attention_loss(g, src_attention, weights)?;
    let mut total = g.scale(l1_coarse, sc::<S>(weights.l1_coarse))?;
    let t = g.scale(l1_fine, sc::<S>(weights.l1_fine))?;
    total = g.add(total, t)?;
    let t = g.scale(stop, sc::<S>(weights.stop))?;
    total = g.add(total, t)?;
    let t = g.scale(ga, sc::<S>(weights.guided_attention))?;
    total = g.add(total, t)?;
    Ok(LossNodes {
        l1_coarse,
        l1_fine,
        stop_bce: stop,
        guided_attention: ga,
        total,
        ga_empty_selection: ga_empty,
    })
}

impl LossNodes {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        LossBreakdown {
            l1_coarse: g.scalar_value(self.l1_coarse).as_f64(),
            l1_fine: g.scalar_value(self.l1_fine).as_f64(),
            stop_bce: g.scalar_value(self.stop_bce).as_f64(),
            guided_attention: g.scalar_value(self.guided_attention).as_f64(),
            total: g.scalar_value(self.total).as_f64(),
            ga_empty_selection: self.ga_empty_selection,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_relative_error, Param};

    type G = Graph<f64>;

    fn pred_node(g: &mut G, rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> TensorId {
        let data: Vec<f64> = (0..rows * cols).map(f).collect();
        g.constant(Tensor::new(vec![rows, cols], data, false).unwrap())
            .unwrap()
    }

    #[test]
    fn masked_l1_zero_when_equal_and_offset_gives_offset() {
        let mut g = G::new();
        let target: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        let pred = pred_node(&mut g, 4, 3, |i| i as f64 * 0.3);
        let l = masked_l1(&mut g, pred, &target, 4).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let pred = pred_node(&mut g, 4, 3, |i| i as f64 * 0.3 - 0.75);
        let l = masked_l1(&mut g, pred, &target, 4).unwrap();
        assert!((g.scalar_value(l) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn masked_l1_ignores_padding_content() {
        let mut g = G::new();
        let target: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let a = pred_node(&mut g, 4, 3, |i| if i < 6 { i as f64 + 0.5 } else { 7.0 });
        let b = pred_node(&mut g, 4, 3, |i| if i < 6 { i as f64 + 0.5 } else { -99.0 });
        let la = masked_l1(&mut g, a, &target, 2).unwrap();
        let lb = masked_l1(&mut g, b, &target, 2).unwrap();
        assert_eq!(g.scalar_value(la), g.scalar_value(lb));
        assert!((g.scalar_value(la) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn masked_l1_rejects_zero_valid() {
        let mut g = G::new();
        let pred = pred_node(&mut g, 2, 2, |_| 0.0);
        assert!(matches!(
            masked_l1(&mut g, pred, &[0.0; 4], 0),
            Err(LossError::NoValidPositions { .. })
        ));
    }

    #[test]
    fn stop_bce_closed_forms_and_weight_linearity() {
        let mut g = G::new();
        // Saturated, correct predictions.
        let logits = pred_node(&mut g, 3, 1, |i| if i == 2 { 20.0 } else { -20.0 });
        let l = stop_bce(&mut g, logits, &[0.0, 0.0, 1.0], 5.0).unwrap();
        assert!(g.scalar_value(l) < 1e-8);

        // Zero logits, all-negative labels: ln 2 regardless of pos_weight.
        let logits = pred_node(&mut g, 4, 1, |_| 0.0);
        let l = stop_bce(&mut g, logits, &[0.0; 4], 5.0).unwrap();
        assert!((g.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);

        // Doubling pos_weight doubles exactly the positive-step contribution.
        let labels = [0.0, 1.0, 0.0];
        let mk = |g: &mut G, w: f64| {
            let logits = pred_node(g, 3, 1, |i| 0.3 * i as f64 - 0.2);
            let l = stop_bce(g, logits, &labels, w).unwrap();
            g.scalar_value(l)
        };
        let l1 = mk(&mut g, 2.0);
        let l2 = mk(&mut g, 4.0);
        // With loss = neg_part + w * pos_part: l2 - l1 = w * pos_part.
        let logits_1 = 0.3f64 - 0.2;
        let pos_part = (1.0 + (-logits_1).exp()).ln() / 3.0;
        assert!((l2 - l1 - 2.0 * pos_part).abs() < 1e-12);
    }

    fn record(g: &mut G, layer: usize, head: usize, rows: usize, cols: usize, data: Vec<f64>) -> AttnRecord {
        let node = g
            .constant(Tensor::new(vec![rows, cols], data, false).unwrap())
            .unwrap();
        AttnRecord {
            layer,
            head,
            node,
            rows,
            cols,
        }
    }

    #[test]
    fn diagonal_one_hot_attention_has_zero_penalty() {
        let mut g = G::new();
        let n = 8;
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = 1.0);
        let rec = record(&mut g, 0, 0, n, n, data);
        let (id, empty) = guided_attention_loss(&mut g, &[rec], &LossWeights::default()).unwrap();
        assert!(!empty);
        assert_eq!(g.scalar_value(id), 0.0);
    }

    #[test]
    fn anti_diagonal_matches_direct_summation_oracle() {
        let mut g = G::new();
        let n = 16;
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + (n - 1 - i)] = 1.0);
        let rec = record(&mut g, 0, 0, n, n, data.clone());
        let (id, _) = guided_attention_loss(&mut g, &[rec], &LossWeights::default()).unwrap();
        // Independent double loop straight from the definition.
        let sigma = 0.4f64;
        let mut oracle = 0.0;
        for r in 0..n {
            for c in 0..n {
                let w = 1.0 - (-((r as f64 / n as f64 - c as f64 / n as f64).powi(2)) / (2.0 * sigma * sigma)).exp();
                oracle += data[r * n + c] * w;
            }
        }
        oracle /= (n * n) as f64;
        assert!((g.scalar_value(id) - oracle).abs() < 1e-12);
        assert!(oracle > 0.0);
    }

    #[test]
    fn uniform_attention_penalty_positive_and_decreasing_in_sigma() {
        let mut vals = Vec::new();
        for sigma in [0.2, 0.4, 0.8, 1.6] {
            let mut g = G::new();
            let n = 12;
            let rec = record(&mut g, 0, 0, n, n, vec![1.0 / n as f64; n * n]);
            let w = LossWeights {
                ga_sigma: sigma,
                ..LossWeights::default()
            };
            let (id, _) = guided_attention_loss(&mut g, &[rec], &w).unwrap();
            // Direct summation oracle per sigma.
            let mut oracle = 0.0;
            for r in 0..n {
                for c in 0..n {
                    let d = r as f64 / n as f64 - c as f64 / n as f64;
                    oracle += (1.0 / n as f64) * (1.0 - (-d * d / (2.0 * sigma * sigma)).exp());
                }
            }
            oracle /= (n * n) as f64;
            let got = g.scalar_value(id);
            assert!((got - oracle).abs() < 1e-12);
            assert!(got > 0.0);
            vals.push(got);
        }
        for w in vals.windows(2) {
            assert!(w[1] < w[0], "penalty should shrink as sigma grows: {vals:?}");
        }
    }

    #[test]
    fn selection_filters_layers_and_permuting_heads_is_invariant() {
        let mk_data = |seed: u64, n: usize| -> Vec<f64> {
            let mut rows = Vec::with_capacity(n * n);
            for r in 0..n {
                let raw: Vec<f64> = (0..n)
                    .map(|c| crate::rng::counter_unit(seed, (r * n + c) as u64) + 0.01)
                    .collect();
                let s: f64 = raw.iter().sum();
                rows.extend(raw.into_iter().map(|v| v / s));
            }
            rows
        };
        let weights = LossWeights::default(); // layers {0, 1}, all heads
        let run = |order: &[usize]| {
            let mut g = G::new();
            let mut recs = Vec::new();
            for &h in order {
                recs.push(record(&mut g, 0, h, 6, 6, mk_data(h as u64, 6)));
            }
            recs.push(record(&mut g, 2, 0, 6, 6, mk_data(99, 6)));
            let (id, _) = guided_attention_loss(&mut g, &recs, &weights).unwrap();
            g.scalar_value(id)
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[3, 1, 0, 2]);
        assert_eq!(a, b);
        // Layer 2 is outside the selection; changing it must not matter.
        let run_no_l2 = {
            let mut g = G::new();
            let recs: Vec<AttnRecord> = [0usize, 1, 2, 3]
                .iter()
                .map(|&h| record(&mut g, 0, h, 6, 6, mk_data(h as u64, 6)))
                .collect();
            let (id, _) = guided_attention_loss(&mut g, &recs, &weights).unwrap();
            g.scalar_value(id)
        };
        assert_eq!(a, run_no_l2);
    }

    #[test]
    fn empty_selection_is_zero_with_warning() {
        let mut g = G::new();
        let rec = record(&mut g, 5, 0, 4, 4, vec![0.25; 16]);
        let (id, empty) = guided_attention_loss(&mut g, &[rec], &LossWeights::default()).unwrap();
        assert!(empty);
        assert_eq!(g.scalar_value(id), 0.0);
    }

    #[test]
    fn total_is_weighted_sum_within_1e12_and_terms_nonnegative() {
        let mut g = G::new();
        let target: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let coarse = pred_node(&mut g, 4, 3, |i| (i as f64 * 0.3).cos());
        let fine = pred_node(&mut g, 4, 3, |i| (i as f64 * 0.4).cos());
        let stop_logits = pred_node(&mut g, 2, 1, |i| i as f64 - 0.5);
        let n = 6;
        let mut probs = vec![0.0; n * n];
        (0..n).for_each(|i| probs[i * n + ((i + 2) % n)] = 1.0);
        let rec = record(&mut g, 0, 0, n, n, probs);
        let weights = LossWeights {
            l1_coarse: 0.7,
            l1_fine: 1.3,
            stop: 0.9,
            guided_attention: 2.0,
            ..LossWeights::default()
        };
        let nodes = combine(
            &mut g,
            coarse,
            fine,
            stop_logits,
            &target,
            3,
            &[0.0, 1.0],
            &[rec],
            &weights,
        )
        .unwrap();
        let b = nodes.breakdown(&g);
        for term in [b.l1_coarse, b.l1_fine, b.stop_bce, b.guided_attention] {
            assert!(term >= 0.0);
        }
        let expect = 0.7 * b.l1_coarse + 1.3 * b.l1_fine + 0.9 * b.stop_bce + 2.0 * b.guided_attention;
        assert!((b.total - expect).abs() < 1e-12, "{} vs {expect}", b.total);
    }

    #[test]
    fn every_term_is_differentiable() {
        let p = Param::new(
            "logits",
            Tensor::new(vec![3, 4], (0..12).map(|i| 0.2 * i as f64 - 1.0).collect(), true).unwrap(),
        );
        let target: Vec<f64> = (0..12).map(|i| (i as f64 * 0.17).sin()).collect();
        let err = max_relative_error(
            &[p.clone()],
            |g| {
                let x = g.param(&p)?;
                let l1 = masked_l1(g, x, &target, 2).map_err(unwrap_loss)?;
                // Guided attention needs row-stochastic input; use softmax.
                let probs = g.softmax_last(x, None)?;
                let rec = AttnRecord {
                    layer: 0,
                    head: 0,
                    node: probs,
                    rows: 3,
                    cols: 4,
                };
                let (ga, _) =
                    guided_attention_loss(g, &[rec], &LossWeights::default()).map_err(unwrap_loss)?;
                let col = g.slice(x, 1, 0, 1)?;
                let stop = stop_bce(g, col, &[0.0, 1.0, 0.0], 3.0).map_err(unwrap_loss)?;
                let a = g.add(l1, ga)?;
                g.add(a, stop)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    fn unwrap_loss(e: LossError) -> TensorError {
        match e {
            LossError::Tensor(t) => t,
            other => panic!("unexpected loss error {other}"),
        }
    }
}

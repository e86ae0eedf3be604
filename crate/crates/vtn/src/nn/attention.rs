//! Multi-head scaled dot-product attention.

use std::rc::Rc;

use rand_chacha::ChaCha12Rng;

use crate::scalar::{sc, Scalar};
use crate::tensor::{Graph, Param, TensorError, TensorId};

use super::Linear;

/// One head's probability matrix kept alive in the graph, tagged with its
/// position in the stack for the guided-attention loss and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct AttnRecord {
    pub layer: usize,
    pub head: usize,
    pub node: TensorId,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<S> {
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(scope: &str, d_model: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(d_model % heads == 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(&format!("{scope}.wq"), d_model, d_model, rng),
            wk: Linear::without_bias(&format!("{scope}.wk"), d_model, d_model, rng),
            wv: Linear::new(&format!("{scope}.wv"), d_model, d_model, rng),
            wo: Linear::new(&format!("{scope}.wo"), d_model, d_model, rng),
            heads,
            d_model,
            d_head: d_model / heads,
        }
    }

    /// Key/value projections alone; incremental decoding caches their rows.
    pub fn project_kv(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
    ) -> Result<(TensorId, TensorId), TensorError> {
        Ok((self.wk.forward(g, x)?, self.wv.forward(g, x)?))
    }

    /// Attention on already-projected keys/values (`k`, `v`: `[T_k x d_model]`).
    ///
    /// `mask`, when given, is row-major `[T_q x T_k]`; disallowed positions
    /// receive probability exactly 0. Per-head probability matrices are
    /// appended to `records` tagged with `layer`.
    pub fn attend(
        &self,
        g: &mut Graph<S>,
        q_in: TensorId,
        k: TensorId,
        v: TensorId,
        mask: Option<Rc<Vec<bool>>>,
        layer: usize,
        records: &mut Vec<AttnRecord>,
    ) -> Result<TensorId, TensorError> {
        let t_q = g.shape(q_in)[0];
        let t_k = g.shape(k)[0];
        if let Some(m) = &mask {
            if m.len() != t_q * t_k {
                return Err(TensorError::InvalidAttr {
                    op: "attention",
                    reason: format!("mask length {} vs {}x{}", m.len(), t_q, t_k),
                });
            }
        }
        let q = self.wq.forward(g, q_in)?;
        let inv_sqrt = S::one() / sc::<S>(self.d_head as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * self.d_head, self.d_head)?;
            let kh = g.slice(k, 1, h * self.d_head, self.d_head)?;
            let vh = g.slice(v, 1, h * self.d_head, self.d_head)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, inv_sqrt)?;
            let probs = g.softmax_last(scaled, mask.clone())?;
            records.push(AttnRecord {
                layer,
                head: h,
                node: probs,
                rows: t_q,
                cols: t_k,
            });
            contexts.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat(&contexts, 1)?;
        self.wo.forward(g, ctx)
    }

    /// Standard q/k/v-from-inputs path.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        q_in: TensorId,
        kv_in: TensorId,
        mask: Option<Rc<Vec<bool>>>,
        layer: usize,
        records: &mut Vec<AttnRecord>,
    ) -> Result<TensorId, TensorError> {
        let (k, v) = self.project_kv(g, kv_in)?;
        self.attend(g, q_in, k, v, mask, layer, records)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        self.wq.collect(out);
        self.wk.collect(out);
        self.wv.collect(out);
        self.wo.collect(out);
    }
}

/// Row-major `[rows x cols]` causal mask: position `t` may attend to `<= t`.
pub fn causal_mask(rows: usize, cols: usize) -> Rc<Vec<bool>> {
    Rc::new(
        (0..rows)
            .flat_map(|t| (0..cols).map(move |c| c <= t))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn saturated_softmax_selects_matching_row() {
        let mut rng = stream(0, "attn-test");
        let d = 4;
        let mha = MultiHeadAttention::<f64>::new("attn", d, 1, &mut rng);
        // Make the projections identity and the output projection identity so
        // the head computation is visible directly.
        for lin in [&mha.wq, &mha.wk, &mha.wv, &mha.wo] {
            let mut t = lin.w.value_mut();
            t.data.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                t.data[i * d + i] = 1.0;
            }
        }
        let mut g = Graph::new();
        // K = V = orthogonal one-hot rows; Q = large multiple of row 2.
        let kv = g
            .constant(Tensor::new(vec![4, 4], {
                let mut m = vec![0.0; 16];
                (0..4).for_each(|i| m[i * 4 + i] = 1.0);
                m
            }, false).unwrap())
            .unwrap();
        let q = g
            .constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 60.0, 0.0], false).unwrap())
            .unwrap();
        let mut records = Vec::new();
        let out = mha.forward(&mut g, q, kv, None, 0, &mut records).unwrap();
        let probs = g.data(records[0].node);
        assert!(probs[2] > 0.999999, "probs {probs:?}");
        let out_row = g.data(out);
        assert!((out_row[2] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn causal_mask_zeroes_future_exactly() {
        let mut rng = stream(1, "attn-causal");
        let mha = MultiHeadAttention::<f64>::new("attn", 8, 2, &mut rng);
        let mut g = Graph::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64) * 0.1 - 0.5).collect();
        let x = g.constant(Tensor::new(vec![5, 8], data, false).unwrap()).unwrap();
        let mut records = Vec::new();
        mha.forward(&mut g, x, x, Some(causal_mask(5, 5)), 3, &mut records)
            .unwrap();
        assert_eq!(records.len(), 2);
        for rec in &records {
            assert_eq!(rec.layer, 3);
            let probs = g.data(rec.node);
            for t in 0..5 {
                for c in 0..5 {
                    if c > t {
                        assert_eq!(probs[t * 5 + c], 0.0);
                    }
                }
                let sum: f64 = probs[t * 5..(t + 1) * 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn random_inputs_rows_sum_to_one_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = stream(seed, "attn-prop");
            let mha = MultiHeadAttention::<f64>::new("attn", 8, 4, &mut rng);
            let mut g = Graph::new();
            let data: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = g
                .constant(Tensor::new(vec![4, 8], data, false).unwrap())
                .unwrap();
            let mut records = Vec::new();
            mha.forward(&mut g, x, x, None, 0, &mut records).unwrap();
            for rec in &records {
                let probs = g.data(rec.node);
                for t in 0..rec.rows {
                    let sum: f64 = probs[t * rec.cols..(t + 1) * rec.cols].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "seed {seed}: row sum {sum}");
                }
            }
        }
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let mut rng = stream(2, "attn-mask");
        let mha = MultiHeadAttention::<f64>::new("attn", 4, 1, &mut rng);
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![3, 4], vec![0.1; 12], false).unwrap())
            .unwrap();
        let bad = causal_mask(2, 2);
        let mut records = Vec::new();
        assert!(mha.forward(&mut g, x, x, Some(bad), 0, &mut records).is_err());
    }
}

//! Decoder prenet: two relu bottleneck layers whose dropout stays active at
//! inference (the usual Tacotron-family behavior), followed by a projection
//! to the model width.

use rand_chacha::ChaCha12Rng;

use crate::rng::mix2;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Param, TensorError, TensorId};

use super::{site_tag, DropoutCtx, Linear};

#[derive(Debug, Clone)]
pub struct Prenet<S> {
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub proj: Linear<S>,
    rate: f64,
    site1: u64,
    site2: u64,
}

impl<S: Scalar> Prenet<S> {
    pub fn new(
        scope: &str,
        in_dim: usize,
        hidden: usize,
        d_model: usize,
        rate: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Prenet {
            fc1: Linear::new(&format!("{scope}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(&format!("{scope}.fc2"), hidden, hidden, rng),
            proj: Linear::new(&format!("{scope}.proj"), hidden, d_model, rng),
            rate,
            site1: site_tag(&format!("{scope}.drop1")),
            site2: site_tag(&format!("{scope}.drop2")),
        }
    }

    /// `row_offset` is the absolute index of the first input row, so
    /// step-by-step decoding draws the same masks as a full-sequence pass.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        ctx: DropoutCtx,
        row_offset: usize,
    ) -> Result<TensorId, TensorError> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h)?;
        // Always-on dropout, in training and inference alike.
        let h = if self.rate > 0.0 {
            g.dropout(h, self.rate, mix2(ctx.key, self.site1), row_offset)?
        } else {
            h
        };
        let h = self.fc2.forward(g, h)?;
        let h = g.relu(h)?;
        let h = if self.rate > 0.0 {
            g.dropout(h, self.rate, mix2(ctx.key, self.site2), row_offset)?
        } else {
            h
        };
        self.proj.forward(g, h)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        self.fc1.collect(out);
        self.fc2.collect(out);
        self.proj.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    #[test]
    fn zero_input_follows_the_bias_path() {
        let mut rng = stream(4, "prenet");
        let pn = Prenet::<f64>::new("prenet", 6, 5, 4, 0.0, &mut rng);
        // Force known biases: fc1 bias 1, fc2 bias -2 (relu clips to 0),
        // proj bias 0.25.
        let set = |lin: &Linear<f64>, bias: f64| {
            lin.b.as_ref().unwrap().value_mut().data.iter_mut().for_each(|v| *v = bias);
            lin.w.value_mut().data.iter_mut().for_each(|v| *v = 0.0);
        };
        set(&pn.fc1, 1.0);
        set(&pn.fc2, -2.0);
        set(&pn.proj, 0.25);
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, 6], vec![0.0; 12], false).unwrap())
            .unwrap();
        let y = pn.forward(&mut g, x, DropoutCtx::eval(1), 0).unwrap();
        for &v in g.data(y) {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn rate_zero_matches_direct_matrix_oracle() {
        let mut rng = stream(5, "prenet-oracle");
        let pn = Prenet::<f64>::new("prenet", 3, 4, 2, 0.0, &mut rng);
        let x = vec![0.3, -0.7, 1.1];
        let mut g = Graph::new();
        let xi = g
            .constant(Tensor::new(vec![1, 3], x.clone(), false).unwrap())
            .unwrap();
        let y = pn.forward(&mut g, xi, DropoutCtx::eval(2), 0).unwrap();

        // Independent dense evaluation.
        let dense = |lin: &Linear<f64>, input: &[f64]| -> Vec<f64> {
            let w = lin.w.value();
            let b = lin.b.as_ref().unwrap().value();
            (0..lin.out_dim)
                .map(|o| {
                    b.data[o]
                        + (0..lin.in_dim)
                            .map(|i| input[i] * w.data[i * lin.out_dim + o])
                            .sum::<f64>()
                })
                .collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let expected = dense(&pn.proj, &relu(dense(&pn.fc2, &relu(dense(&pn.fc1, &x)))));
        for (a, b) in g.data(y).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_context_key_gives_identical_output() {
        let mut rng = stream(6, "prenet-det");
        let pn = Prenet::<f64>::new("prenet", 4, 8, 4, 0.5, &mut rng);
        let run = |key: u64| {
            let mut g = Graph::new();
            let x = g
                .constant(Tensor::new(vec![3, 4], vec![0.5; 12], false).unwrap())
                .unwrap();
            let y = pn.forward(&mut g, x, DropoutCtx::eval(key), 0).unwrap();
            g.data(y).to_vec()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }
}

//! Five-layer convolutional postnet predicting a residual refinement of the
//! coarse mel output. Kernel-5 same-padding convolutions, tanh on all but
//! the last layer.

use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;
use crate::tensor::{Graph, Param, Tensor, TensorError, TensorId};

use super::xavier;

#[derive(Debug, Clone)]
pub struct Postnet<S> {
    layers: Vec<(Param<S>, Param<S>)>,
    pub n_mels: usize,
}

impl<S: Scalar> Postnet<S> {
    pub fn new(
        scope: &str,
        n_mels: usize,
        channels: usize,
        kernel: usize,
        n_layers: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "postnet kernel must be odd");
        assert!(n_layers >= 2);
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let c_in = if i == 0 { n_mels } else { channels };
            let c_out = if i == n_layers - 1 { n_mels } else { channels };
            let w = Param::new(
                format!("{scope}.{i}.weight"),
                xavier(vec![c_out, c_in, kernel], c_in * kernel, c_out * kernel, rng),
            );
            let b = Param::new(
                format!("{scope}.{i}.bias"),
                Tensor::zeros(vec![c_out], true),
            );
            layers.push((w, b));
        }
        Postnet { layers, n_mels }
    }

    /// `[T x n_mels] -> [T x n_mels]` residual.
    pub fn forward(&self, g: &mut Graph<S>, x: TensorId) -> Result<TensorId, TensorError> {
        if g.shape(x)[0] < 1 || g.shape(x)[1] != self.n_mels {
            return Err(TensorError::InvalidShape {
                op: "postnet",
                shape: g.shape(x).to_vec(),
                reason: format!("expected [T x {}] with T >= 1", self.n_mels),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wi = g.param(w)?;
            let bi = g.param(b)?;
            h = g.conv1d(h, wi, bi)?;
            if i < last {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        for (w, b) in &self.layers {
            out.push(w.clone());
            out.push(b.clone());
        }
    }

    pub fn zero_all(&self) {
        for (w, b) in &self.layers {
            w.value_mut().data.iter_mut().for_each(|v| *v = S::zero());
            b.value_mut().data.iter_mut().for_each(|v| *v = S::zero());
        }
    }
}

//! Sinusoidal positional encoding with a trainable scale.
//!
//! The encoder and decoder streams each own one scalar `alpha` so the model
//! can adapt the positional magnitude to its input space; both start at 1.

use crate::scalar::{sc, Scalar};
use crate::tensor::{Graph, Param, Tensor, TensorError, TensorId};

use super::{dropout_site, site_tag, DropoutCtx};

#[derive(Debug, Clone)]
pub struct ScaledPositionalEncoding<S> {
    pub alpha: Param<S>,
    table: Vec<S>,
    pub max_len: usize,
    pub d_model: usize,
    rate: f64,
    site: u64,
}

/// The sinusoid table row for `pos`: pair `2i` is `sin(pos / 10000^(2i/d))`,
/// pair `2i+1` the matching cosine.
fn table_row<S: Scalar>(pos: usize, d_model: usize) -> impl Iterator<Item = S> {
    (0..d_model).map(move |j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        if j % 2 == 0 {
            sc::<S>(angle.sin())
        } else {
            sc::<S>(angle.cos())
        }
    })
}

impl<S: Scalar> ScaledPositionalEncoding<S> {
    pub fn new(scope: &str, d_model: usize, max_len: usize, rate: f64) -> Self {
        let mut table = Vec::with_capacity(max_len * d_model);
        for pos in 0..max_len {
            table.extend(table_row::<S>(pos, d_model));
        }
        let mut alpha = Tensor::zeros(vec![1], true);
        alpha.data[0] = S::one();
        ScaledPositionalEncoding {
            alpha: Param::new(format!("{scope}.alpha"), alpha),
            table,
            max_len,
            d_model,
            rate,
            site: site_tag(&format!("{scope}.drop")),
        }
    }

    /// `x + alpha * table[start .. start + rows]`.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        x: TensorId,
        start: usize,
        ctx: DropoutCtx,
    ) -> Result<TensorId, TensorError> {
        let rows = g.shape(x)[0];
        if g.shape(x)[1] != self.d_model {
            return Err(TensorError::ShapeMismatch {
                op: "positional_encode",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.max_len, self.d_model],
            });
        }
        if start + rows > self.max_len {
            return Err(TensorError::InvalidAttr {
                op: "positional_encode",
                reason: format!(
                    "positions {}..{} exceed table length {}",
                    start,
                    start + rows,
                    self.max_len
                ),
            });
        }
        let slice = self.table[start * self.d_model..(start + rows) * self.d_model].to_vec();
        let tab = g.constant(Tensor::new(vec![rows, self.d_model], slice, false)?)?;
        let alpha = g.param(&self.alpha)?;
        let scaled = g.mul(tab, alpha)?;
        let out = g.add(x, scaled)?;
        dropout_site(g, out, self.rate, self.site, ctx, start)
    }

    pub fn collect(&self, out: &mut Vec<Param<S>>) {
        out.push(self.alpha.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_relative_error;

    fn pe() -> ScaledPositionalEncoding<f64> {
        ScaledPositionalEncoding::new("pe", 8, 32, 0.0)
    }

    #[test]
    fn position_zero_row_alternates_zero_one() {
        let pe = pe();
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![1, 8], vec![0.0; 8], false).unwrap())
            .unwrap();
        let out = pe.forward(&mut g, x, 0, DropoutCtx::eval(0)).unwrap();
        assert_eq!(g.data(out), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn alpha_zero_is_identity() {
        let pe = pe();
        pe.alpha.value_mut().data[0] = 0.0;
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, 8], data.clone(), false).unwrap())
            .unwrap();
        let out = pe.forward(&mut g, x, 0, DropoutCtx::eval(0)).unwrap();
        assert_eq!(g.data(out), data.as_slice());
    }

    #[test]
    fn position_one_matches_direct_formula() {
        let d = 8usize;
        let pe = ScaledPositionalEncoding::<f64>::new("pe", d, 4, 0.0);
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, d], vec![0.0; 2 * d], false).unwrap())
            .unwrap();
        let out = pe.forward(&mut g, x, 0, DropoutCtx::eval(0)).unwrap();
        let row1 = &g.data(out)[d..2 * d];
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            assert!((row1[2 * i] - freq.sin()).abs() < 1e-12);
            assert!((row1[2 * i + 1] - freq.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn length_beyond_table_rejected() {
        let pe = pe();
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![40, 8], vec![0.0; 320], false).unwrap())
            .unwrap();
        assert!(pe.forward(&mut g, x, 0, DropoutCtx::eval(0)).is_err());
    }

    #[test]
    fn alpha_receives_gradient() {
        let pe = pe();
        let err = max_relative_error(
            &[pe.alpha.clone()],
            |g| {
                let x = g.constant(Tensor::new(vec![3, 8], vec![0.2; 24], false)?)?;
                let y = pe.forward(g, x, 0, DropoutCtx::eval(0))?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
        assert!(pe
            .alpha
            .value()
            .grad
            .as_ref()
            .map(|gr| gr[0].abs() > 0.0)
            .unwrap_or(false));
    }
}

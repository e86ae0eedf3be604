//! Adam with bias correction and global-norm gradient clipping, plus the
//! warmup/inverse-sqrt learning-rate schedule.

use crate::Param;

use super::TrainError;

/// `scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`: linear
/// warmup to the peak at `step == warmup`, then inverse-sqrt decay.
pub fn noam_lr(step: u64, warmup: u64, d_model: usize, scale: f64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::Invalid("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 {
        return Err(TrainError::Invalid("warmup must be >= 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step count for bias correction.
    pub t: u64,
    /// Per-parameter first/second moments, aligned with the name.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        let moments = params
            .iter()
            .filter(|p| p.requires_grad())
            .map(|p| (p.name().to_string(), vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            moments,
        }
    }

    /// Clip the accumulated gradients to `clip_norm` (global L2), then apply
    /// one bias-corrected update. Returns the pre-clip gradient norm.
    /// A non-finite gradient rejects the whole step without touching state.
    pub fn step(
        &mut self,
        params: &[Param],
        lr: f64,
        clip_norm: f64,
    ) -> Result<f64, TrainError> {
        let trainable: Vec<&Param> = params.iter().filter(|p| p.requires_grad()).collect();
        if trainable.len() != self.moments.len() {
            return Err(TrainError::Invalid(format!(
                "optimizer tracks {} parameters but {} are trainable",
                self.moments.len(),
                trainable.len()
            )));
        }
        let mut norm_sq = 0.0f64;
        for p in &trainable {
            let t = p.value();
            match &t.grad {
                Some(g) => {
                    for &v in g {
                        if !v.is_finite() {
                            return Err(TrainError::NonFiniteGradient {
                                param: p.name().to_string(),
                            });
                        }
                        norm_sq += v * v;
                    }
                }
                None => {
                    return Err(TrainError::Invalid(format!(
                        "parameter {} has no gradient; run backward first",
                        p.name()
                    )))
                }
            }
        }
        let norm = norm_sq.sqrt();
        let rescale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, (name, m, v)) in trainable.iter().zip(self.moments.iter_mut()) {
            debug_assert_eq!(p.name(), name);
            let mut t = p.value_mut();
            let grad = t.grad.clone().expect("checked above");
            for i in 0..grad.len() {
                let g = grad[i] * rescale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                t.data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }

    pub fn zero_grads(params: &[Param]) {
        for p in params {
            p.zero_grad();
        }
    }
}

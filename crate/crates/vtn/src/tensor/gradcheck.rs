//! Finite-difference gradient verification.

use crate::scalar::{sc, Scalar};

use super::{Graph, Param, TensorError, TensorId};

/// Compare analytic gradients against central finite differences for every
/// `requires_grad` parameter touched by `build`.
///
/// `build` must be deterministic: it is re-run once per perturbed coordinate
/// and must construct the same computation each time, reading current values
/// from the given parameters. Frozen parameters are skipped. Returns
/// `max |analytic - numeric| / max(|numeric|, floor)` with `floor = 1e-8`.
pub fn max_relative_error<S, F>(
    params: &[Param<S>],
    mut build: F,
    step: f64,
) -> Result<f64, TensorError>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>) -> Result<TensorId, TensorError>,
{
    let floor = 1e-8;
    for p in params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            let t = p.value();
            match (&t.grad, t.requires_grad) {
                (Some(grad), true) => grad.iter().map(|v| v.as_f64()).collect(),
                _ => vec![0.0; t.numel()],
            }
        })
        .collect();

    let h = sc::<S>(step);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let n = p.numel();
        for e in 0..n {
            let orig = p.value().data[e];
            let mut eval = |v: S| -> Result<f64, TensorError> {
                p.value_mut().data[e] = v;
                let mut g = Graph::new();
                let loss = build(&mut g)?;
                Ok(g.scalar_value(loss).as_f64())
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            p.value_mut().data[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (analytic[pi][e] - numeric).abs() / numeric.abs().max(floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

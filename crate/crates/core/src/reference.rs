//! Dense AdamW baseline: every parameter updated every step.

use crate::autodiff::backward_dense;
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::optim::AdamWHyper;
use crate::schedule::BatchSource;

#[derive(Debug, Clone)]
pub struct DenseRun {
    pub model: Model,
    /// Loss of every step, before its update.
    pub losses: Vec<f64>,
}

pub fn train_dense_adamw(mut model: Model, data: &mut dyn BatchSource, steps: usize, hyper: &AdamWHyper) -> Result<DenseRun> {
    hyper.validate()?;
    let mut m: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.values.len()]).collect();
    let mut v = m.clone();
    let mut losses = Vec::with_capacity(steps);
    for t in 1..=steps {
        let batch = data.next_batch()?;
        let (loss, grads) = {
            let (loss, tape) = forward(&model, &batch)?;
            (loss, backward_dense(&tape)?)
        };
        let n = i32::try_from(t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - hyper.beta1.powi(n);
        let bc2 = 1.0 - hyper.beta2.powi(n);
        for (idx, p) in model.params.iter_mut().enumerate() {
            if !p.meta.trainable {
                continue;
            }
            let g = grads.get(p.id()).as_slice();
            let (mi, vi) = (&mut m[idx], &mut v[idx]);
            for (e, theta) in p.values.as_mut_slice().iter_mut().enumerate() {
                mi[e] = hyper.beta1 * mi[e] + (1.0 - hyper.beta1) * g[e];
                vi[e] = hyper.beta2 * vi[e] + (1.0 - hyper.beta2) * g[e] * g[e];
                let m_hat = mi[e] / bc1;
                let v_hat = vi[e] / bc2;
                *theta -= hyper.eta * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.lambda * *theta);
            }
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite { what: "parameters", context: format!("dense step {t}") });
        }
        losses.push(loss);
    }
    Ok(DenseRun { model, losses })
}

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first and second moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

pub type Grads = BTreeMap<String, Vec<f32>>;

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
    }
    norm
}

/// One AdamW update with bias correction and decoupled weight decay
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. Nothing changes if any gradient is
/// non-finite or mis-shaped.
pub fn optimizer_step(
    params: &mut Parameters,
    grads: &Grads,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::invalid(format!(
                "gradient for {name} has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi as f64;
            let m_new = BETA1 * *mi as f64 + (1.0 - BETA1) * gi;
            let v_new = BETA2 * *vi as f64 + (1.0 - BETA2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + ADAM_EPS);
            let wf = *w as f64;
            *w = (wf - lr * (update + weight_decay * wf)) as f32;
        }
    }
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Result, TensorError};

/// One momentum-SGD update on a flat buffer: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(TensorError::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(TensorError::Config(format!("momentum {momentum} outside [0, 1)")));
    }
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite { op: "sgd_step" });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

/// Half-cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => cosine_lr(base, step, total),
        }
    }
}

/// Momentum SGD over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect(),
        }
    }

    /// Update the parameters listed in `ids`; parameters without a gradient stay put.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], grads: &Gradients, lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Err(TensorError::Config(format!(
                "refusing to update frozen {} parameters",
                store.namespace().as_str()
            )));
        }
        for &id in ids {
            let Some(g) = grads.param(id) else { continue };
            let vel = &mut self.velocity[id.index()];
            sgd_step(store.get_mut(id).data_mut(), g.data(), vel, lr, self.momentum)?;
        }
        Ok(())
    }
}

/// Adam, used for contrastive pretraining of the backbone.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "adam" });
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data()[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data()[i] * g.data()[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

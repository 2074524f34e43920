//! First-order optimizers over named parameter maps.
//!
//! No weight decay and no gradient clipping: both would perturb the norm
//! growth of pre-normalization embeddings that the experiments measure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter or gradient tensors keyed by `<block>.<layer>.<kind>` names.
pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        })
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub eps: f64,
    first: NamedTensors,
    second: NamedTensors,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            eps: 1e-8,
            first: NamedTensors::new(),
            second: NamedTensors::new(),
        })
    }

    /// Second-moment estimate for one parameter, if the optimizer keeps one.
    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// Applies one update. `grads` must cover exactly the keys of `params`.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        if let Some(name) = params.keys().find(|k| !grads.contains_key(*k)) {
            return Err(Error::Contract(format!("missing gradient for parameter {name}")));
        }
        if let Some(name) = grads.keys().find(|k| !params.contains_key(*k)) {
            return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
        }
        for (name, p) in params.iter() {
            let g = &grads[name];
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in p.data_mut().iter_mut().zip(g) {
                        *w -= self.lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (((w, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
                OptimizerKind::Rmsprop => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((w, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.data_mut()) {
                        *vv = self.rho * *vv + (1.0 - self.rho) * gv * gv;
                        *w -= self.lr * gv / (vv.sqrt() + self.eps);
                    }
                }
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name} after update")));
            }
        }
        Ok(())
    }
}

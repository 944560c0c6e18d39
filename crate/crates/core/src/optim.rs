//! First-order optimizers over named model parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Transformer;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr` to every parameter in `grads`.
    pub fn step(&mut self, model: &mut Transformer, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, grad) in grads {
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
            let p = param.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

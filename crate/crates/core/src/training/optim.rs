use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Precision, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub name: String,
    pub first: Tensor,
    pub second: Tensor,
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// treated as having a zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let slots = store
            .params()
            .map(|e| AdamSlot {
                name: e.name.clone(),
                first: Tensor::zeros(e.value.shape()),
                second: Tensor::zeros(e.value.shape()),
            })
            .collect();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            steps: 0,
            slots,
        }
    }

    pub fn slot(&self, name: &str) -> Option<&AdamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// One update of every parameter in `store`. Nothing changes when a
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Tensor)],
        lr: f64,
        precision: Precision,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let slot = self
                .slot(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if slot.first.shape() != g.shape() {
                return Err(Error::shape("adam gradient", g.shape(), slot.first.shape()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for slot in &mut self.slots {
            let grad = grads
                .iter()
                .find(|(n, _)| *n == slot.name)
                .map(|(_, g)| g.data());
            let param = store.get_mut(&slot.name).ok_or_else(|| {
                Error::invalid(format!(
                    "optimizer state for missing parameter {}",
                    slot.name
                ))
            })?;
            let (m, v, p) = (
                slot.first.data_mut(),
                slot.second.data_mut(),
                param.data_mut(),
            );
            for i in 0..p.len() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            precision.apply(&mut slot.first);
            precision.apply(&mut slot.second);
            precision.apply(param);
        }
        Ok(())
    }
}

/// Reduce-on-plateau: multiply the learning rate by `factor` once the
/// monitored loss has failed to strictly decrease for `patience` epochs in
/// a row. The counter restarts after every improvement or reduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss; true when the learning rate should drop.
    pub fn observe(&mut self, loss: f64) -> bool {
        match self.best {
            Some(b) if loss >= b || loss.is_nan() => self.bad_epochs += 1,
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            true
        } else {
            false
        }
    }

    /// Learning rate after `observe` reported a plateau.
    pub fn reduce(&self, lr: f64) -> f64 {
        lr * self.factor
    }
}

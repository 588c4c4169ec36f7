//! AdamW with global-norm clipping, and the plateau scheduler.

use crate::nn::{ParamStore, Params};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub step: u64,
    m: Params,
    v: Params,
}

impl AdamW {
    pub fn new(params: &Params, lr: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Global L2 norm of the gradients of trainable tensors.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .grads
            .tensors()
            .iter()
            .filter(|(n, _)| !store.is_frozen(n))
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Clips `store.grads` to `clip_norm` and applies one update. Returns
    /// the norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let norm = Self::grad_norm(store);
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = self.lr / bc1;
        let bc2_sqrt = bc2.sqrt();

        let frozen: Vec<bool> = store.params.tensors().iter().map(|(n, _)| store.is_frozen(n)).collect();
        let grads = store.grads.tensors();
        let params = store.params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, g), m), v), frozen) in params.into_iter().zip(grads).zip(ms).zip(vs).zip(frozen) {
            if frozen {
                continue;
            }
            let (p, g, m, v) = (p.1, g.1, m.1, v.1);
            for k in 0..p.data.len() {
                let grad = g.data[k] * scale;
                p.data[k] *= 1.0 - self.lr * self.weight_decay;
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * grad;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * grad * grad;
                let denom = v.data[k].sqrt() / bc2_sqrt + self.eps;
                p.data[k] -= step_size * m.data[k] / denom;
            }
        }
        norm
    }
}

/// Learning-rate halving after `patience` epochs without strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Learning rate in effect after each epoch of a loss trace.
pub fn plateau_trace(lr: f64, losses: &[f64]) -> Vec<f64> {
    let mut s = Plateau::new(lr, 0.5, 3);
    losses
        .iter()
        .map(|&l| {
            s.observe(l);
            s.lr
        })
        .collect()
}

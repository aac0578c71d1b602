//! Plain SGD with optional classical momentum.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid("lr", "learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// `w ← w − η·v`, `v ← μ·v + g`, restricted to entries where `trainable`
    /// is true (all entries when `None`). Untouched entries keep their bits.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], trainable: Option<&[bool]>) -> Result<()> {
        if params.len() != grads.len() || trainable.is_some_and(|t| t.len() != params.len()) {
            return Err(Error::shape("parameters and gradients differ in length"));
        }
        if self.momentum > 0.0 && self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for i in 0..params.len() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let step = if self.momentum > 0.0 {
                self.velocity[i] = self.momentum * self.velocity[i] + grads[i];
                self.velocity[i]
            } else {
                grads[i]
            };
            if step != 0.0 {
                params[i] -= self.lr * step;
            }
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sgd update"));
        }
        Ok(())
    }
}

/// Scales every group by `max / ‖g‖₂` when the joint norm exceeds `max`
/// (`max = 0` disables clipping). Returns the norm before scaling.
pub fn clip_global_norm(groups: &mut [&mut [f64]], max: f64) -> f64 {
    let norm = libm::sqrt(groups.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>());
    if max > 0.0 && norm > max {
        let s = max / norm;
        for g in groups.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One stateless step `w ← w − η·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    Sgd::new(lr, 0.0)?.step(params, grads, None)
}

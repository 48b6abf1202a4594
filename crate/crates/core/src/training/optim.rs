//! Poly learning-rate schedule and SGD with momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// `initial · (1 - iter/max_iter)^power`.
pub fn poly_lr(initial: f64, power: f64, iter: usize, max_iter: usize) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::contract(format!(
            "poly schedule queried at iteration {} of {}",
            iter, max_iter
        )));
    }
    let remaining = 1.0 - iter as f64 / max_iter as f64;
    Ok(initial * remaining.powf(power))
}

/// Momentum SGD with decoupled learning rate:
/// `v <- μ·v + g + λ·p` (λ only for conv weights), `p <- p - lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per learnable parameter, created on first use.
    pub velocity: BTreeMap<String, Tensor>,
    /// Completed steps.
    pub iteration: usize,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            iteration: 0,
        }
    }

    /// Updates every learnable tensor in `params`. Tensors without a gradient
    /// are stepped with a zero gradient, so decay and momentum still apply.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::contract(format!("learning rate {} is negative", lr)));
        }
        if let Some(name) = grads.keys().find(|n| !params.contains(n)) {
            return Err(Error::contract(format!(
                "gradient for unknown parameter `{}`",
                name
            )));
        }
        for (name, p) in params.iter_mut() {
            let Some(kind) = ParamKind::from_name(name).filter(|k| k.learnable()) else {
                continue;
            };
            let grad = grads.get(name);
            if let Some(g) = grad {
                if g.shape() != p.shape() {
                    return Err(Error::contract(format!(
                        "gradient for `{}` is {:?}, parameter is {:?}",
                        name,
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            if v.shape() != p.shape() {
                return Err(Error::contract(format!(
                    "velocity for `{}` has the wrong shape",
                    name
                )));
            }
            let decay = if kind.decays() {
                self.weight_decay
            } else {
                0.0
            };
            let (pd, vd) = (p.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]) + decay * pd[i];
                vd[i] = self.momentum * vd[i] + g;
                pd[i] -= lr * vd[i];
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

//! SGD with momentum and weight decay, and the poly learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Apply weight decay to batch-norm scale and shift as well.
    pub decay_norm_affine: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            epochs: 300,
            batch_size: 10,
            decay_norm_affine: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.power.is_finite() && self.power > 0.0) {
            return bad(format!("power must be positive, got {}", self.power));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        Ok(())
    }

    /// Total iterations for a training set of `samples` images.
    pub fn max_iter(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }
}

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(Error::Argument(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// One update of every learnable parameter; gradients are consumed.
///
/// `g' = grad + weight_decay * p`, `v = momentum * v + g'`, `p -= lr * v`.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, config: &OptimConfig) -> Result<()> {
    if let Some((name, _)) = store
        .iter()
        .find(|(_, p)| p.kind.learnable() && p.value.grad().is_none())
    {
        return Err(Error::MissingGradient(name.to_string()));
    }
    let (lr, momentum) = (T::of(lr), T::of(config.momentum));
    for (_, p) in store.iter_mut() {
        if !p.kind.learnable() {
            p.value.clear_grad();
            continue;
        }
        let decay = if p.kind.is_norm_affine() && !config.decay_norm_affine {
            T::zero()
        } else {
            T::of(config.weight_decay)
        };
        let grad = p.value.take_grad().expect("checked above");
        let velocity = p.velocity.get_or_insert_with(|| vec![T::zero(); grad.len()]);
        for ((w, v), g) in p.value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
            *v = momentum * *v + g + decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

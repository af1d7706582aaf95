//! Plain SGD with a cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{lit, Element, NumericError, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub base_lr: f64,
    /// Length `T` of the cosine schedule.
    pub total_steps: usize,
    pub min_lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-3,
            total_steps: 1,
            min_lr: 0.0,
            momentum: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.total_steps == 0 {
            return Err("total_steps must be >= 1".into());
        }
        if !(0.0 <= self.min_lr && self.min_lr <= self.base_lr) {
            return Err(format!(
                "need 0 <= min_lr ({}) <= base_lr ({})",
                self.min_lr, self.base_lr
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// `min_lr + ½(base_lr − min_lr)(1 + cos(π·step/T))`. Steps past `T` clamp to `min_lr`.
pub fn lr_at(step: usize, cfg: &SgdConfig) -> f64 {
    let t = cfg.total_steps.max(1);
    if step > t {
        log::warn!("lr_at: step {step} past schedule length {t}, clamping to min_lr");
        return cfg.min_lr;
    }
    let progress = step as f64 / t as f64;
    cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD state. With momentum 0 no velocity is kept.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Element> {
    momentum: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// `value ← value − lr·grad` on trainable parameters, then zeroes all grads.
    /// A non-finite gradient aborts the whole step before anything is written.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<(), NumericError> {
        if let Some(bad) = params
            .iter()
            .find(|p| p.trainable && !p.grad.all_finite())
        {
            return Err(NumericError::NonFiniteGrad(bad.name.clone()));
        }
        let lr_t = lit::<T>(lr);
        let mu = lit::<T>(self.momentum);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let update = if self.momentum > 0.0 {
                let v = self
                    .velocity
                    .entry(p.name.clone())
                    .or_insert_with(|| Tensor::zeros(p.grad.shape()));
                for (vi, &gi) in v.data_mut().iter_mut().zip(p.grad.data()) {
                    *vi = mu * *vi + gi;
                }
                v.clone()
            } else {
                p.grad.clone()
            };
            for (x, &u) in p.value_mut().data_mut().iter_mut().zip(update.data()) {
                *x = *x - lr_t * u;
            }
        }
        params.zero_grad();
        Ok(())
    }
}

/// Single momentum-free step; see [`Sgd::step`].
pub fn sgd_step<T: Element>(params: &mut ParamSet<T>, lr: f64) -> Result<(), NumericError> {
    Sgd::new(0.0).step(params, lr)
}

use std::collections::BTreeMap;

use super::{GradError, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` over which the rate ramps linearly from 0.
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            total_steps: 1,
        }
    }
}

/// Moment buffers keyed by parameter name, plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<T>>,
    second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Learning rate applied at 1-based step `step`: a linear ramp over the
    /// warmup steps, then constant.
    pub fn effective_lr(&self, step: u64) -> f64 {
        let c = &self.config;
        let warm = (c.warmup_fraction * c.total_steps as f64).ceil();
        if warm >= 1.0 && (step as f64) < warm {
            return c.lr * step as f64 / warm;
        }
        c.lr
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.first.get(name)?.as_slice(), self.second.get(name)?.as_slice()))
    }
}

/// One bias-corrected Adam update with decoupled weight decay. Parameters with
/// no entry in `grads` are left untouched. All gradients are validated before
/// any parameter changes.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
) -> Result<(), GradError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| GradError::Invalid(format!("no parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(GradError::Shape { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !g.is_finite() {
            return Err(GradError::NonFiniteGrad(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config.clone();
    let lr = state.effective_lr(state.step);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.first.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
        let v = state.second.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
        let (tb1, tb2) = (T::c(b1), T::c(b2));
        let decay = T::c(lr * cfg.weight_decay);
        let step = T::c(lr);
        let (tc1, tc2, eps) = (T::c(c1), T::c(c2), T::c(cfg.eps));
        for ((w, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = tb1 * *mi + (T::one() - tb1) * gi;
            *vi = tb2 * *vi + (T::one() - tb2) * gi * gi;
            let mhat = *mi / tc1;
            let vhat = *vi / tc2;
            *w = *w - decay * *w - step * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

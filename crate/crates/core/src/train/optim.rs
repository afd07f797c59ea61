//! AdamW, the warmup-cosine schedule and parameter EMA.

use crate::element::{cst, Element};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer moments, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW<T: Element> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update at learning rate `lr`. Decay is decoupled: flagged
    /// parameters shrink by `lr · wd · p` before the adaptive step.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Validation(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::dim("adamw gradient", self.m[i].shape(), g.shape()));
            }
            if !g.all_finite() {
                let name = &params.meta(crate::model::ParamId(i)).name;
                return Err(Error::Evaluation(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (cst::<T>(c.beta1), cst::<T>(c.beta2));
        let (one_b1, one_b2) = (cst::<T>(1.0 - c.beta1), cst::<T>(1.0 - c.beta2));
        let bc1 = cst::<T>(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = cst::<T>(1.0 - c.beta2.powi(self.step as i32));
        let eps = cst::<T>(c.eps);
        let lr_t = cst::<T>(lr);
        let shrink = cst::<T>(1.0 - lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let id = crate::model::ParamId(i);
            let decay = params.meta(id).decay && c.weight_decay != 0.0;
            let p = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                if decay {
                    *p *= shrink;
                }
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then half-cosine
/// decay to 0 at `total`.
pub fn cosine_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup || step >= total {
        return if step >= total { 0.0 } else { peak };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `shadow ← decay · shadow + (1 − decay) · params`.
pub fn ema_update<T: Element>(
    shadow: &mut ParamStore<T>,
    params: &ParamStore<T>,
    decay: f64,
) -> Result<()> {
    if !shadow.same_layout(params) {
        return Err(Error::Validation(
            "EMA shadow layout differs from parameters".into(),
        ));
    }
    let (d, e) = (cst::<T>(decay), cst::<T>(1.0 - decay));
    for (s, p) in shadow.values_mut().iter_mut().zip(params.values()) {
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = d * *s + e * p;
        }
    }
    Ok(())
}

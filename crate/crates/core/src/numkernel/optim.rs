use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coupling added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First/second moment accumulators for every trainable block.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let moments = store
            .iter()
            .map(|(_, e)| {
                e.trainable
                    .then(|| (Tensor::zeros(e.value.shape()), Tensor::zeros(e.value.shape())))
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    /// One bias-corrected Adam update. Blocks absent from `grads` are treated
    /// as having zero gradient. A non-finite gradient aborts before any block
    /// is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        for id in store.trainable_ids() {
            if let Some(g) = grads.param(id) {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.entry(id).name.clone()));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (wd, eps) = (T::of(c.weight_decay), T::of(c.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for id in store.trainable_ids() {
            let grad = grads.param(id).map(|g| g.data());
            let (m, v) = self.moments[id.index()]
                .as_mut()
                .expect("moments exist for trainable blocks");
            let p = store.get_mut(id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                let g = grad.map_or(T::zero(), |g| g[k]) + wd * p[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                p[k] -= step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

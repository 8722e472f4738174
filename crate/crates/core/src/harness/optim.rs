//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{HseError, Result};
use crate::numerics::{Real, Tensor};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HseError::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HseError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(HseError::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimiser state: one velocity buffer per parameter, created on first use.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v` for every non-frozen parameter
    /// with a gradient. `lr` overrides the configured rate (for schedules).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(HseError::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mu = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        let lr = T::from_f64(lr);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else {
                continue;
            };
            if store.get(id).frozen {
                continue;
            }
            let theta = store.value_mut(id);
            if g.shape() != theta.shape() {
                return Err(HseError::Evaluation(format!(
                    "gradient {:?} does not match parameter {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let v = self.velocity[id.index()]
                .get_or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + (gi + wd * *t);
                *t -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full([1], v), false);
        s
    }

    #[test]
    fn plain_gradient_step_without_momentum_or_decay() {
        let mut s = one_param(1.0);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        opt.step(&mut s, &[Some(Tensor::full([1], 2.0))], 0.1)
            .unwrap();
        assert!((s.value(s.find("w").unwrap()).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn frozen_and_gradless_parameters_stay_put() {
        let mut s = ParamStore::<f64>::new();
        s.add("a", Tensor::full([2], 1.0), true);
        s.add("b", Tensor::full([2], 1.0), false);
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step(&mut s, &[Some(Tensor::ones([2])), None], 0.005)
            .unwrap();
        assert!(s.iter().all(|(_, p)| p.value.data() == [1.0, 1.0]));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut s = one_param(1.0);
        let mut opt = Sgd::new(SgdConfig::default());
        assert!(opt.step(&mut s, &[Some(Tensor::ones([2]))], 0.1).is_err());
    }
}

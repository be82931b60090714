use serde::{Deserialize, Serialize};

use crate::network::ParamStore;
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmsPropConfig {
    /// Decay of the running mean of squared gradients.
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { rho: 0.9, eps: 1e-7 }
    }
}

/// RMSprop: `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g / (√v + ε)`.
pub struct RmsProp<T> {
    cfg: RmsPropConfig,
    sq: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(cfg: RmsPropConfig, store: &ParamStore<T>) -> Self {
        Self { cfg, sq: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    /// Parameters without a gradient (`None`) keep both value and state.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        let (rho, eps, lr) = (cst::<T>(self.cfg.rho), cst::<T>(self.cfg.eps), cst::<T>(lr));
        let one_m = T::one() - rho;
        for ((param, v), g) in store.tensors_mut().iter_mut().zip(&mut self.sq).zip(grads) {
            let Some(g) = g else { continue };
            for ((p, s), &gi) in param.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *s = rho * *s + one_m * gi * gi;
                *p = *p - lr * gi / (s.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, NetConfig};

    #[test]
    fn first_step_moves_by_lr_over_sqrt_one_minus_rho() {
        let cfg = NetConfig { n_sources: 1, base_width: 8, classifier_hidden: [4, 4], ..NetConfig::default() };
        let mut m = build_model::<f64>(&cfg, 0).unwrap();
        let before = m.store.tensors()[0].clone();
        let mut opt = RmsProp::new(RmsPropConfig { rho: 0.9, eps: 0.0 }, &m.store);
        let mut grads: Vec<Option<Tensor<f64>>> = vec![None; m.store.len()];
        grads[0] = Some(Tensor::full(before.shape(), -2.0));
        opt.step(&mut m.store, &grads, 1e-3);
        let expected = 1e-3 / 0.1f64.sqrt();
        for (a, b) in m.store.tensors()[0].data().iter().zip(before.data()) {
            assert!((a - b - expected).abs() < 1e-12);
        }
        assert_eq!(m.store.tensors()[1], build_model::<f64>(&cfg, 0).unwrap().store.tensors()[1]);
    }
}

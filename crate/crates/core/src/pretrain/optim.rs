use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) step: u64,
    pub(crate) m: Vec<Array2<f64>>,
    pub(crate) v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.value.dim())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone,
    /// including their decay.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Array2<f64>>]) {
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let decay = if p.decay { weight_decay } else { 0.0 };
            Zip::from(&mut p.value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *w -= lr * (update + decay * *w);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut ps = ParamSet::new();
        ps.push("w", array![[1.0, -1.0]], false);
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        opt.step(&mut ps, &[Some(array![[2.0, -0.5]])]);
        let w = ps.get(0);
        assert!((w[[0, 0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[[0, 1]] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_applies_only_to_flagged_params() {
        let mut ps = ParamSet::new();
        ps.push("a", array![[1.0]], true);
        ps.push("b", array![[1.0]], false);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[Some(array![[0.0]]), Some(array![[0.0]])]);
        assert!((ps.get(0)[[0, 0]] - (1.0 - 1e-3 * 0.5)).abs() < 1e-12);
        assert_eq!(ps.get(1)[[0, 0]], 1.0);
    }
}

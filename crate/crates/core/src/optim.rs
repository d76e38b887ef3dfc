//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn momentum_sgd(lr: f64) -> Self {
        Self::Sgd { lr, momentum: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd { lr, .. } | Self::Adam { lr, .. } => *lr,
        }
    }
}

/// Optimizer moments, one slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            step: 0,
            first: zeros,
            second,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must align with `params` tensor order.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Sums per-sample gradient lists in input order and scales the total by `scale`.
pub(crate) fn reduce_grads(parts: Vec<Vec<Tensor>>, scale: f64) -> Vec<Tensor> {
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one gradient set");
    for part in it {
        for (a, g) in acc.iter_mut().zip(&part) {
            *a += g;
        }
    }
    acc.iter_mut().for_each(|g| g.scale_inplace(scale));
    acc
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && total > max_norm {
        let c = max_norm / total;
        grads.iter_mut().for_each(|g| g.scale_inplace(c));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(vec![1.0, -2.0]));
        s
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for cfg in [OptimizerConfig::momentum_sgd(0.0), OptimizerConfig::adam(0.0)] {
            let mut s = store();
            let before = s.digest();
            let mut st = OptimizerState::new(cfg, &s);
            st.apply(&mut s, &[Tensor::row(vec![0.3, -0.7])]);
            assert_eq!(before, s.digest());
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut s = store();
        let mut st = OptimizerState::new(OptimizerConfig::Sgd { lr: 0.5, momentum: 0.0 }, &s);
        st.apply(&mut s, &[Tensor::row(vec![1.0, 1.0])]);
        assert_eq!(s.tensors()[0].data(), &[0.5, -2.5]);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sum_sq().sqrt() - 1.0).abs() < 1e-12);
    }
}

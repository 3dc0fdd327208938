//! Adam with L2 weight decay.

use alloc::vec::Vec;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: OptimConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| t.map(|_| 0.0))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Parameters without a gradient are
    /// treated as having a zero loss gradient (weight decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Contract(alloc::format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let shape = store.get(id).shape();
            if let Some(g) = grads.get(id) {
                if g.shape() != shape {
                    return Err(Error::dim("adam_step", shape, g.shape()));
                }
            }
            if self.first[id.index()].shape() != shape {
                return Err(Error::dim("adam_step", shape, self.first[id.index()].shape()));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(c.beta2, t as f64);
        for id in store.ids() {
            let grad = grads.get(id);
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let mut gk = grad.map_or(0.0, |g| g.data()[k]);
                if !c.decoupled_weight_decay {
                    gk += c.weight_decay * p[k];
                }
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                if c.decoupled_weight_decay {
                    p[k] -= c.learning_rate * c.weight_decay * p[k];
                }
                p[k] -= c.learning_rate * m_hat / (libm::sqrt(v_hat) + c.epsilon);
            }
        }
        Ok(())
    }
}

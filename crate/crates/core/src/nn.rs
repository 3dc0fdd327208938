use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::uniform_fan_in;
use crate::tensor::Tensor;

/// `x · W (+ b)` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(rng, in_dim, out_dim, in_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_fan_in(rng, 1, out_dim, in_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.affine(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two affine layers with a GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct GeluMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GeluMlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 3]) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dims[0], dims[1], true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dims[1], dims[2], true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

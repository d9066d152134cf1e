use crate::tensor::rng::{label, stream, truncated_normal_vec};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Deterministic parameter initialisation.
///
/// Each parameter draws from its own stream keyed by its name, so values do
/// not depend on construction order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Init {
    pub seed: u64,
    pub std: f64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed, std: 0.02 }
    }

    pub fn truncated_normal(&self, store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        let mut rng = stream(self.seed, &[label(name)]);
        let data = truncated_normal_vec(&mut rng, n, self.std);
        store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn constant(&self, store: &mut ParamStore, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        store.add(name, Tensor::full(shape.to_vec(), value))
    }
}

/// Affine map `x·W + b` on the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = init.truncated_normal(store, &format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = init.constant(store, &format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Overwrite the weight with `w` (`[in, out]`, row-major) and the bias with `b`.
    pub fn set(&self, store: &mut ParamStore, w: &[f64], b: &[f64]) {
        store.get_mut(self.weight).value.data_mut().copy_from_slice(w);
        store.get_mut(self.bias).value.data_mut().copy_from_slice(b);
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize) -> Result<Self> {
        let gamma = init.constant(store, &format!("{name}.gamma"), &[dim], 1.0)?;
        let beta = init.constant(store, &format!("{name}.beta"), &[dim], 0.0)?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

use super::Init;
use crate::tensor::{Graph, ParamId, ParamStore, Result, Var};

/// Square-kernel 2-D convolution, stride 1, zero padding `k/2` (size preserving for odd `k`).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = init.truncated_normal(store, &format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel])?;
        let bias = init.constant(store, &format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self { weight, bias, kernel })
    }

    /// `[B, C_in, H, W]` → `[B, C_out, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), 1, self.kernel / 2)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

use super::{CrossAttention, Init, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Var};

/// Pre-norm residual block: `y = x + SA(LN₁(x))`, `out = y + FFN(LN₂(y))`,
/// with a `D → 4D → D` GELU feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: CrossAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, init, &format!("{name}.ln1"), dim)?,
            attn: CrossAttention::new(store, init, &format!("{name}.attn"), dim, dim, dim, dim, heads)?,
            norm2: LayerNorm::new(store, init, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, 4 * dim)?,
            fc2: Linear::new(store, init, &format!("{name}.fc2"), 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h)?;
        let y = g.add(x, a)?;
        let h = self.norm2.forward(g, store, y)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, store, h)?;
        g.add(y, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.ids().to_vec();
        ids.extend(self.attn.ids());
        ids.extend(self.norm2.ids());
        ids.extend(self.fc1.ids());
        ids.extend(self.fc2.ids());
        ids
    }
}

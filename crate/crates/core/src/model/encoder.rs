use crate::nn::{resample_matrix, Init, PatchEmbed, TokenGrid, TransformerBlock};
use crate::tensor::{shape_err, Graph, ParamId, ParamStore, Result, Var};

/// Patch embedding, learned absolute positions, then a stack of transformer blocks.
///
/// The position table is stored for `base` and bilinearly resampled when the
/// input grid differs.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub pos: ParamId,
    pub base: TokenGrid,
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        channels: usize,
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        base: TokenGrid,
    ) -> Result<Self> {
        let embed = PatchEmbed::new(store, init, &format!("{name}.embed"), channels, patch, dim)?;
        let pos = init.truncated_normal(store, &format!("{name}.pos"), &[base.len(), dim])?;
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, init, &format!("{name}.block{i}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self { embed, pos, base, blocks })
    }

    pub fn positions(&self, g: &mut Graph, store: &ParamStore, grid: TokenGrid) -> Result<Var> {
        let pos = g.param(store, self.pos);
        if grid == self.base {
            return Ok(pos);
        }
        let r = g.constant(resample_matrix(self.base, grid))?;
        g.matmul(r, pos)
    }

    /// `[C, H, W]` image to `[N, D]` tokens.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Var, TokenGrid)> {
        if g.shape(image).len() != 3 {
            return Err(shape_err("encoder", format!("expected [C, H, W], got {:?}", g.shape(image))));
        }
        let (tokens, grid) = self.embed.forward(g, store, image)?;
        let pos = self.positions(g, store, grid)?;
        let mut x = g.add(tokens, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        Ok((x, grid))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.ids().to_vec();
        ids.push(self.pos);
        ids.extend(self.blocks.iter().flat_map(|b| b.ids()));
        ids
    }
}

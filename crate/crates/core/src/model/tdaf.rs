use crate::nn::{grid_to_tokens, tokens_to_grid, Conv2d, CrossAttention, Init, Linear, TokenGrid};
use crate::tensor::{shape_err, Graph, ParamId, ParamStore, Result, Var};

/// Text-driven fusion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Tdaf {
    pub text_proj: Linear,
    /// Queries `Cat(F_vi, F_iv)` (width 2D), keys/values the projected text.
    pub ca: CrossAttention,
    pub gate_v: Conv2d,
    pub gate_i: Conv2d,
    pub sa1: Conv2d,
    pub sa2: Conv2d,
}

impl Tdaf {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        dim: usize,
        text_dim: usize,
        heads: usize,
        gate_kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            text_proj: Linear::new(store, init, &format!("{name}.text_proj"), text_dim, dim)?,
            ca: CrossAttention::new(store, init, &format!("{name}.ca"), 2 * dim, dim, dim, dim, heads)?,
            gate_v: Conv2d::new(store, init, &format!("{name}.gate_v"), dim, dim, gate_kernel)?,
            gate_i: Conv2d::new(store, init, &format!("{name}.gate_i"), dim, dim, gate_kernel)?,
            sa1: Conv2d::new(store, init, &format!("{name}.sa1"), dim, (dim / 2).max(1), 1)?,
            sa2: Conv2d::new(store, init, &format!("{name}.sa2"), (dim / 2).max(1), 1, 1)?,
        })
    }

    /// `F_r = CA(Cat(F_vi, F_iv), proj(F_t))`.
    pub fn text_informed_reconstruction(&self, g: &mut Graph, store: &ParamStore, f_vi: Var, f_iv: Var, f_t: Var) -> Result<Var> {
        let st = g.shape(f_t);
        if st.len() != 2 || st[1] != self.text_proj.in_dim {
            return Err(shape_err("tdaf_text", format!("text semantics {st:?}, expected [L, {}]", self.text_proj.in_dim)));
        }
        let q = g.concat(&[f_vi, f_iv], 1)?;
        let kv = self.text_proj.forward(g, store, f_t)?;
        self.ca.forward(g, store, q, kv)
    }

    /// `G_v = σ(W_v ∗ (F_v + F_vi))`, `G_i = σ(W_i ∗ (F_i + F_iv))` on the token grid.
    #[allow(clippy::too_many_arguments)]
    pub fn compute_gates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_v: Var,
        f_vi: Var,
        f_i: Var,
        f_iv: Var,
        grid: TokenGrid,
    ) -> Result<(Var, Var)> {
        let gate = |g: &mut Graph, conv: &Conv2d, a: Var, b: Var| -> Result<Var> {
            let s = g.add(a, b)?;
            let map = tokens_to_grid(g, s, grid)?;
            let r = conv.forward(g, store, map)?;
            let r = g.sigmoid(r)?;
            grid_to_tokens(g, r)
        };
        let gv = gate(g, &self.gate_v, f_v, f_vi)?;
        let gi = gate(g, &self.gate_i, f_i, f_iv)?;
        Ok((gv, gi))
    }

    /// `α = σ(conv₂(ReLU(conv₁(F_r))))`, `[N, 1]`.
    pub fn spatial_attention(&self, g: &mut Graph, store: &ParamStore, f_r: Var, grid: TokenGrid) -> Result<Var> {
        let map = tokens_to_grid(g, f_r, grid)?;
        let h = self.sa1.forward(g, store, map)?;
        let h = g.relu(h)?;
        let a = self.sa2.forward(g, store, h)?;
        let a = g.sigmoid(a)?;
        grid_to_tokens(g, a)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.text_proj.ids().to_vec();
        ids.extend(self.ca.ids());
        for c in [&self.gate_v, &self.gate_i, &self.sa1, &self.sa2] {
            ids.extend(c.ids());
        }
        ids
    }
}

/// `F = α(1+G_v)(F_v+F_vi) + (1−α)(1+G_i)(F_i+F_iv)` with `α` (`[N, 1]`) broadcast over channels.
#[allow(clippy::too_many_arguments)]
pub fn gated_fusion(g: &mut Graph, f_v: Var, f_vi: Var, f_i: Var, f_iv: Var, g_v: Var, g_i: Var, alpha: Var) -> Result<Var> {
    let sa = g.shape(alpha);
    if sa.len() != 2 || sa[1] != 1 || sa[0] != g.shape(f_v)[0] {
        return Err(shape_err("gated_fusion", format!("alpha {sa:?} for tokens {:?}", g.shape(f_v))));
    }
    let x_v = g.add(f_v, f_vi)?;
    let x_i = g.add(f_i, f_iv)?;
    let gv1 = g.affine(g_v, 1.0, 1.0)?;
    let gi1 = g.affine(g_i, 1.0, 1.0)?;
    let wv = g.mul(alpha, gv1)?;
    let t_v = g.mul(wv, x_v)?;
    let one_minus = g.affine(alpha, -1.0, 1.0)?;
    let wi = g.mul(one_minus, gi1)?;
    let t_i = g.mul(wi, x_i)?;
    g.add(t_v, t_i)
}

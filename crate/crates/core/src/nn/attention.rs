use super::{Init, Linear};
use crate::tensor::{attention_weights, shape_err, Graph, ParamId, ParamStore, Result, Var};

/// Multi-head cross-attention with separate query and key/value sources.
///
/// `out = W_O · concat_h softmax(Q_h K_hᵀ / √(D/h)) V_h` with
/// `Q = queries·W_Q`, `K = kv·W_K`, `V = kv·W_V`. No positional terms are
/// added, so the result is invariant to the order of key/value tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl CrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::tensor::TensorError::Attr {
                op: "cross_attention",
                detail: format!("width {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.q"), query_dim, dim)?,
            key: Linear::new(store, init, &format!("{name}.k"), kv_dim, dim)?,
            value: Linear::new(store, init, &format!("{name}.v"), kv_dim, dim)?,
            output: Linear::new(store, init, &format!("{name}.o"), dim, out_dim)?,
            heads,
        })
    }

    fn check_inputs(&self, g: &Graph, queries: Var, kv: Var) -> Result<()> {
        let (sq, skv) = (g.shape(queries), g.shape(kv));
        if sq.len() != 2 || sq[1] != self.query.in_dim {
            return Err(shape_err("cross_attention", format!("queries {sq:?}, expected [N, {}]", self.query.in_dim)));
        }
        if skv.len() != 2 || skv[1] != self.key.in_dim {
            return Err(shape_err("cross_attention", format!("keys/values {skv:?}, expected [M, {}]", self.key.in_dim)));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, kv: Var) -> Result<Var> {
        self.check_inputs(g, queries, kv)?;
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, kv)?;
        let v = self.value.forward(g, store, kv)?;
        let heads = g.attention(q, k, v, self.heads)?;
        self.output.forward(g, store, heads)
    }

    /// Per-head attention weights `[heads, N_q, N_kv]` for the given tokens.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, queries: Var, kv: Var) -> Result<Vec<f64>> {
        self.check_inputs(g, queries, kv)?;
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, kv)?;
        Ok(attention_weights(g.value(q), g.value(k), self.heads))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output].iter().flat_map(|l| l.ids()).collect()
    }
}

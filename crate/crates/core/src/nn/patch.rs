use super::{Init, Linear};
use crate::tensor::{shape_err, Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Token grid dimensions `(rows, cols)`; `N = rows·cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid for an `h×w` image cut into `patch×patch` tiles.
    pub fn for_image(h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(shape_err("patch_embed", format!("image {h}x{w} not divisible by patch size {patch}")));
        }
        Ok(Self::new(h / patch, w / patch))
    }
}

/// `[N, D]` tokens to a `[1, D, rows, cols]` feature map.
pub fn tokens_to_grid(g: &mut Graph, tokens: Var, grid: TokenGrid) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 2 || s[0] != grid.len() {
        return Err(shape_err("tokens_to_grid", format!("{s:?} tokens for a {}x{} grid", grid.rows, grid.cols)));
    }
    let t = g.transpose(tokens, &[1, 0])?;
    g.reshape(t, &[1, s[1], grid.rows, grid.cols])
}

/// `[1, D, rows, cols]` feature map back to `[N, D]` tokens.
pub fn grid_to_tokens(g: &mut Graph, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(shape_err("grid_to_tokens", format!("expected [1, D, H, W], got {s:?}")));
    }
    let flat = g.reshape(map, &[s[1], s[2] * s[3]])?;
    g.transpose(flat, &[1, 0])
}

/// Learned linear projection of non-overlapping `p×p` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, channels: usize, patch: usize, dim: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, init, name, channels * patch * patch, dim)?, patch, channels })
    }

    /// `[C, H, W]` image to `[(H/p)(W/p), D]` tokens in row-major patch order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Var, TokenGrid)> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(shape_err("patch_embed", format!("expected [{}, H, W] image, got {s:?}", self.channels)));
        }
        let p = self.patch;
        let grid = TokenGrid::for_image(s[1], s[2], p)?;
        let x = g.reshape(image, &[s[0], grid.rows, p, grid.cols, p])?;
        let x = g.transpose(x, &[1, 3, 0, 2, 4])?;
        let x = g.reshape(x, &[grid.len(), s[0] * p * p])?;
        Ok((self.proj.forward(g, store, x)?, grid))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        self.proj.ids()
    }
}

/// Learned linear map from tokens back to `p×p` pixel patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchUnembed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchUnembed {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize, patch: usize, channels: usize) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, init, name, dim, channels * patch * patch)?, patch, channels })
    }

    /// `[N, D]` tokens to a `[C, rows·p, cols·p]` image.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, grid: TokenGrid) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 || s[0] != grid.len() {
            return Err(shape_err("patch_unembed", format!("{s:?} tokens for a {}x{} grid", grid.rows, grid.cols)));
        }
        let (p, c) = (self.patch, self.channels);
        let x = self.proj.forward(g, store, tokens)?;
        let x = g.reshape(x, &[grid.rows, grid.cols, c, p, p])?;
        let x = g.transpose(x, &[2, 0, 3, 1, 4])?;
        g.reshape(x, &[c, grid.rows * p, grid.cols * p])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        self.proj.ids()
    }
}

fn linear_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    (0..to)
        .map(|i| {
            if from == 1 {
                return vec![(0, 1.0)];
            }
            let src = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(from - 1);
            let t = src - lo as f64;
            if hi == lo || t == 0.0 {
                vec![(lo, 1.0)]
            } else {
                vec![(lo, 1.0 - t), (hi, t)]
            }
        })
        .collect()
}

/// Bilinear (half-pixel-centre) resampling matrix `[to.len(), from.len()]`
/// acting on row-major grids. Identity when the grids match.
pub fn resample_matrix(from: TokenGrid, to: TokenGrid) -> Tensor {
    let rows = linear_weights(from.rows, to.rows);
    let cols = linear_weights(from.cols, to.cols);
    let mut m = Tensor::zeros([to.len(), from.len()]);
    let n_from = from.len();
    for (r, rw) in rows.iter().enumerate() {
        for (c, cw) in cols.iter().enumerate() {
            let row = &mut m.data_mut()[(r * to.cols + c) * n_from..][..n_from];
            for &(sr, wr) in rw {
                for &(sc, wc) in cw {
                    row[sr * from.cols + sc] += wr * wc;
                }
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_identity_and_partition_of_unity() {
        let a = TokenGrid::new(3, 4);
        let id = resample_matrix(a, a);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(id.data()[i * 12 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let up = resample_matrix(a, TokenGrid::new(5, 7));
        for row in up.data().chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let t = g.constant(Tensor::new([6, 4], data.clone()).unwrap()).unwrap();
        let grid = TokenGrid::new(2, 3);
        let m = tokens_to_grid(&mut g, t, grid).unwrap();
        assert_eq!(g.shape(m), &[1, 4, 2, 3]);
        // channel 1 of token (row 1, col 2) is token 5, element 1
        assert_eq!(g.value(m).data()[6 + 5], 21.0);
        let back = grid_to_tokens(&mut g, m).unwrap();
        assert_eq!(g.value(back).data(), data.as_slice());
    }
}

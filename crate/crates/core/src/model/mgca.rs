use super::encoder::Encoder;
use crate::image::Image;
use crate::nn::{CrossAttention, Init, TokenGrid};
use crate::sig::MaskSemantics;
use crate::tensor::{shape_err, Graph, ParamId, ParamStore, Result, Var};

/// Split an image into `image ⊙ M` and `image ⊙ M̄`, broadcasting over channels.
pub fn decompose(image: &Image, mask: &MaskSemantics) -> Result<(Image, Image)> {
    if image.dims() != mask.dims() {
        return Err(shape_err(
            "decompose",
            format!("image {}x{} vs mask {:?}", image.height(), image.width(), mask.dims()),
        ));
    }
    let m = mask.mask.to_f64();
    let mc = mask.complement.to_f64();
    let n = m.len();
    let mut fg = image.clone();
    let mut bg = image.clone();
    for (i, (f, b)) in fg.data_mut().iter_mut().zip(bg.data_mut().iter_mut()).enumerate() {
        *f *= m[i % n];
        *b *= mc[i % n];
    }
    Ok((fg, bg))
}

/// The six encoded token streams, each `[N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub vis: Var,
    pub ir: Var,
    pub vis_fg: Var,
    pub vis_bg: Var,
    pub ir_fg: Var,
    pub ir_bg: Var,
    pub grid: TokenGrid,
}

/// Global and masked passes through the per-modality encoders (weights
/// shared across the three passes of each modality).
pub fn encode_streams(
    g: &mut Graph,
    store: &ParamStore,
    vis_encoder: &Encoder,
    ir_encoder: &Encoder,
    vis: &Image,
    ir: &Image,
    mask: &MaskSemantics,
) -> Result<Streams> {
    let (vis_f, vis_b) = decompose(vis, mask)?;
    let (ir_f, ir_b) = decompose(ir, mask)?;
    let mut run = |enc: &Encoder, img: &Image| -> Result<(Var, TokenGrid)> {
        let x = g.constant(img.to_tensor())?;
        enc.forward(g, store, x)
    };
    let (v, grid) = run(vis_encoder, vis)?;
    let (vf, _) = run(vis_encoder, &vis_f)?;
    let (vb, _) = run(vis_encoder, &vis_b)?;
    let (i, _) = run(ir_encoder, ir)?;
    let (i_f, _) = run(ir_encoder, &ir_f)?;
    let (ib, _) = run(ir_encoder, &ir_b)?;
    Ok(Streams { vis: v, ir: i, vis_fg: vf, vis_bg: vb, ir_fg: i_f, ir_bg: ib, grid })
}

/// Cross-modal reconstructions. `vi_*` take visible queries and infrared
/// keys/values; `iv_*` the reverse.
#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub vi_fg: Var,
    pub vi_bg: Var,
    pub iv_fg: Var,
    pub iv_bg: Var,
    pub vi: Var,
    pub iv: Var,
}

/// Four independent cross-attention parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Mgca {
    pub vi_fg: CrossAttention,
    pub vi_bg: CrossAttention,
    pub iv_fg: CrossAttention,
    pub iv_bg: CrossAttention,
}

impl Mgca {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let ca = |store: &mut ParamStore, part: &str| {
            CrossAttention::new(store, init, &format!("{name}.{part}"), dim, dim, dim, dim, heads)
        };
        Ok(Self {
            vi_fg: ca(store, "vi_fg")?,
            vi_bg: ca(store, "vi_bg")?,
            iv_fg: ca(store, "iv_fg")?,
            iv_bg: ca(store, "iv_bg")?,
        })
    }

    pub fn cross_reconstruct(&self, g: &mut Graph, store: &ParamStore, s: &Streams) -> Result<Reconstruction> {
        let vi_fg = self.vi_fg.forward(g, store, s.vis_fg, s.ir_fg)?;
        let vi_bg = self.vi_bg.forward(g, store, s.vis_bg, s.ir_bg)?;
        let iv_fg = self.iv_fg.forward(g, store, s.ir_fg, s.vis_fg)?;
        let iv_bg = self.iv_bg.forward(g, store, s.ir_bg, s.vis_bg)?;
        let vi = g.add(vi_fg, vi_bg)?;
        let iv = g.add(iv_fg, iv_bg)?;
        Ok(Reconstruction { vi_fg, vi_bg, iv_fg, iv_bg, vi, iv })
    }

    /// Mask-free reconstruction on the global streams with the foreground sets.
    pub fn direct(&self, g: &mut Graph, store: &ParamStore, vis: Var, ir: Var) -> Result<(Var, Var)> {
        let vi = self.vi_fg.forward(g, store, vis, ir)?;
        let iv = self.iv_fg.forward(g, store, ir, vis)?;
        Ok((vi, iv))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.vi_fg, &self.vi_bg, &self.iv_fg, &self.iv_bg].iter().flat_map(|c| c.ids()).collect()
    }
}

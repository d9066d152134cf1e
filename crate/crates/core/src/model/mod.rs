//! The fusion network: per-modality encoders, mask-guided cross-attention,
//! text-driven gated fusion and a transformer decoder.

mod encoder;
pub mod mgca;
pub mod tdaf;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use encoder::Encoder;
pub use mgca::{decompose, encode_streams, Mgca, Reconstruction, Streams};
pub use tdaf::{gated_fusion, Tdaf};

use crate::image::Image;
use crate::nn::{Init, LayerNorm, Linear, PatchUnembed, TokenGrid, TransformerBlock};
use crate::sig::{MaskSemantics, TextSemantics};
use crate::tensor::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, Graph, ParamId, ParamStore, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("pair {id}: {detail}")]
    Pair { id: String, detail: String },
    #[error("no semantics for pair {0}")]
    MissingSemantics(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> Stage<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| ModelError::Stage { stage, source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    NoMgca,
    NoTivr,
    NoGaf,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMgca, Variant::NoTivr, Variant::NoGaf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMgca => "no-mgca",
            Variant::NoTivr => "no-tivr",
            Variant::NoGaf => "no-gaf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full, no-mgca, no-tivr or no-gaf)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub text_dim: usize,
    /// Transformer blocks per encoder and in the decoder.
    pub depth: usize,
    pub gate_kernel: usize,
    /// Image side the position tables are stored for.
    pub base_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { patch: 4, dim: 64, heads: 4, text_dim: 64, depth: 4, gate_kernel: 3, base_size: 96, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.dim == 0 || self.text_dim == 0 || self.base_size == 0 {
            return bad("patch, dim, text_dim and base_size must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.base_size % self.patch != 0 {
            return bad(format!("base_size {} not divisible by patch {}", self.base_size, self.patch));
        }
        if self.gate_kernel % 2 == 0 {
            return bad(format!("gate_kernel {} must be odd", self.gate_kernel));
        }
        Ok(())
    }

    pub fn base_grid(&self) -> TokenGrid {
        TokenGrid::new(self.base_size / self.patch, self.base_size / self.patch)
    }

    pub fn to_meta(&self, variant: Variant) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("variant", variant.to_string());
        put("patch", self.patch.to_string());
        put("dim", self.dim.to_string());
        put("heads", self.heads.to_string());
        put("text_dim", self.text_dim.to_string());
        put("depth", self.depth.to_string());
        put("gate_kernel", self.gate_kernel.to_string());
        put("base_size", self.base_size.to_string());
        put("seed", self.seed.to_string());
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<(Self, Variant)> {
        let get = |k: &str| {
            meta.get(&format!("model.{k}"))
                .ok_or_else(|| ModelError::Config(format!("checkpoint header lacks model.{k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| ModelError::Config(format!("model.{k} is not an integer")))
        };
        let variant = get("variant")?.parse().map_err(ModelError::Config)?;
        let cfg = Self {
            patch: num("patch")? as usize,
            dim: num("dim")? as usize,
            heads: num("heads")? as usize,
            text_dim: num("text_dim")? as usize,
            depth: num("depth")? as usize,
            gate_kernel: num("gate_kernel")? as usize,
            base_size: num("base_size")? as usize,
            seed: num("seed")?,
        };
        cfg.validate()?;
        Ok((cfg, variant))
    }
}

/// Registered visible (`3×H×W`) and infrared (`1×H×W`) images in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub vis: Image,
    pub ir: Image,
}

impl ImagePair {
    /// Values are clamped to [0, 1].
    pub fn new(id: impl Into<String>, vis: Image, ir: Image) -> Result<Self> {
        let id = id.into();
        if vis.channels() != 3 || ir.channels() != 1 {
            return Err(ModelError::Pair {
                id,
                detail: format!("expected 3-channel visible and 1-channel infrared, got {} and {}", vis.channels(), ir.channels()),
            });
        }
        if vis.dims() != ir.dims() {
            return Err(ModelError::Pair {
                id,
                detail: format!("visible is {:?}, infrared is {:?}", vis.dims(), ir.dims()),
            });
        }
        Ok(Self { id, vis: vis.clamp01(), ir: ir.clamp01() })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vis.dims()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Semantics {
    pub mask: MaskSemantics,
    pub text: TextSemantics,
}

#[derive(Clone, Debug, Default)]
pub struct FuseOptions {
    /// Replace the computed spatial weights (`[N, 1]`) by this map.
    pub alpha: Option<Tensor>,
}

/// Graph handles of every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub grid: TokenGrid,
    pub f_v: Var,
    pub f_i: Var,
    /// Absent for the mask-free variant.
    pub masked: Option<[Var; 4]>,
    pub f_vi: Var,
    pub f_iv: Var,
    pub f_r: Option<Var>,
    pub gates: Option<(Var, Var)>,
    pub alpha: Option<Var>,
    pub fused: Var,
    /// `[3, H, W]` in (0, 1).
    pub image: Var,
}

/// Values of the intermediates, `[N, D]` unless noted.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub grid: TokenGrid,
    pub f_v: Tensor,
    pub f_i: Tensor,
    /// `F_v^m, F_v^m̄, F_i^m, F_i^m̄`.
    pub masked: Option<[Tensor; 4]>,
    pub f_vi: Tensor,
    pub f_iv: Tensor,
    pub f_r: Option<Tensor>,
    pub gates: Option<(Tensor, Tensor)>,
    /// `[N, 1]`.
    pub alpha: Option<Tensor>,
    pub fused: Tensor,
}

impl FeatureBundle {
    fn collect(g: &Graph, v: &ForwardVars) -> Self {
        let t = |x: Var| g.value(x).clone();
        Self {
            grid: v.grid,
            f_v: t(v.f_v),
            f_i: t(v.f_i),
            masked: v.masked.map(|m| m.map(t)),
            f_vi: t(v.f_vi),
            f_iv: t(v.f_iv),
            f_r: v.f_r.map(t),
            gates: v.gates.map(|(a, b)| (t(a), t(b))),
            alpha: v.alpha.map(t),
            fused: t(v.fused),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub unembed: PatchUnembed,
}

impl Decoder {
    fn new(store: &mut ParamStore, init: &Init, name: &str, c: &ModelConfig) -> std::result::Result<Self, TensorError> {
        let blocks = (0..c.depth)
            .map(|i| TransformerBlock::new(store, init, &format!("{name}.block{i}"), c.dim, c.heads))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(store, init, &format!("{name}.ln"), c.dim)?,
            unembed: PatchUnembed::new(store, init, &format!("{name}.unembed"), c.dim, c.patch, 3)?,
        })
    }

    /// Tokens to a `[3, H, W]` image through a sigmoid.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, grid: TokenGrid) -> std::result::Result<Var, TensorError> {
        let mut x = tokens;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        let x = self.norm.forward(g, store, x)?;
        let img = self.unembed.forward(g, store, x, grid)?;
        g.sigmoid(img)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.blocks.iter().flat_map(|b| b.ids()).collect();
        ids.extend(self.norm.ids());
        ids.extend(self.unembed.ids());
        ids
    }
}

/// Outcome of one pair in [`FusionModel::fuse_batch`].
#[derive(Debug)]
pub struct BatchOutcome {
    pub id: String,
    pub result: Result<Image>,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    config: ModelConfig,
    variant: Variant,
    store: ParamStore,
    pub vis_encoder: Encoder,
    pub ir_encoder: Encoder,
    pub mgca: Mgca,
    pub tdaf: Tdaf,
    /// `Cat(F_vi, F_iv) → D` replacing the text path; only in the no-tivr variant.
    pub bypass: Option<Linear>,
    pub decoder: Decoder,
}

impl FusionModel {
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let init = Init::new(c.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let base = c.base_grid();
        let vis_encoder = Encoder::new(s, &init, "vis_enc", 3, c.patch, c.dim, c.heads, c.depth, base).stage("init")?;
        let ir_encoder = Encoder::new(s, &init, "ir_enc", 1, c.patch, c.dim, c.heads, c.depth, base).stage("init")?;
        let mgca = Mgca::new(s, &init, "mgca", c.dim, c.heads).stage("init")?;
        let tdaf = Tdaf::new(s, &init, "tdaf", c.dim, c.text_dim, c.heads, c.gate_kernel).stage("init")?;
        let bypass = match variant {
            Variant::NoTivr => Some(Linear::new(s, &init, "bypass", 2 * c.dim, c.dim).stage("init")?),
            _ => None,
        };
        let decoder = Decoder::new(s, &init, "dec", c).stage("init")?;
        Ok(Self { config, variant, store, vis_encoder, ir_encoder, mgca, tdaf, bypass, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Forward pass on an already patch-aligned pair.
    pub fn forward(&self, g: &mut Graph, vis: &Image, ir: &Image, sem: &Semantics, opts: &FuseOptions) -> Result<ForwardVars> {
        let store = &self.store;
        let (h, w) = vis.dims();
        if sem.mask.dims() != (h, w) {
            return Err(ModelError::Stage {
                stage: "encode",
                source: crate::tensor::shape_err("mask", format!("{:?} mask for a {h}x{w} image", sem.mask.dims())),
            });
        }

        let (f_v, f_i, masked, f_vi, f_iv, grid) = match self.variant {
            Variant::NoMgca => {
                let x = g.constant(vis.to_tensor()).stage("encode")?;
                let (f_v, grid) = self.vis_encoder.forward(g, store, x).stage("encode")?;
                let x = g.constant(ir.to_tensor()).stage("encode")?;
                let (f_i, _) = self.ir_encoder.forward(g, store, x).stage("encode")?;
                let (vi, iv) = self.mgca.direct(g, store, f_v, f_i).stage("mgca")?;
                (f_v, f_i, None, vi, iv, grid)
            }
            _ => {
                let s = encode_streams(g, store, &self.vis_encoder, &self.ir_encoder, vis, ir, &sem.mask).stage("encode")?;
                let r = self.mgca.cross_reconstruct(g, store, &s).stage("mgca")?;
                (s.vis, s.ir, Some([s.vis_fg, s.vis_bg, s.ir_fg, s.ir_bg]), r.vi, r.iv, s.grid)
            }
        };

        let (f_r, gates, alpha, fused) = if self.variant == Variant::NoGaf {
            (None, None, None, g.add(f_vi, f_iv).stage("tdaf")?)
        } else {
            let (f_r, alpha) = match &opts.alpha {
                Some(a) => {
                    if a.shape() != [grid.len(), 1] {
                        return Err(ModelError::Stage {
                            stage: "tdaf",
                            source: crate::tensor::shape_err("alpha", format!("override {:?}, expected [{}, 1]", a.shape(), grid.len())),
                        });
                    }
                    (None, g.constant(a.clone()).stage("tdaf")?)
                }
                None => {
                    let f_r = match &self.bypass {
                        Some(bypass) => {
                            let cat = g.concat(&[f_vi, f_iv], 1).stage("tdaf")?;
                            bypass.forward(g, store, cat).stage("tdaf")?
                        }
                        None => {
                            let t = g.constant(sem.text.embeddings().clone()).stage("tdaf")?;
                            self.tdaf.text_informed_reconstruction(g, store, f_vi, f_iv, t).stage("tdaf")?
                        }
                    };
                    (Some(f_r), self.tdaf.spatial_attention(g, store, f_r, grid).stage("tdaf")?)
                }
            };
            let (gv, gi) = self.tdaf.compute_gates(g, store, f_v, f_vi, f_i, f_iv, grid).stage("tdaf")?;
            let fused = gated_fusion(g, f_v, f_vi, f_i, f_iv, gv, gi, alpha).stage("tdaf")?;
            (f_r, Some((gv, gi)), Some(alpha), fused)
        };

        let image = self.decoder.forward(g, store, fused, grid).stage("decode")?;
        Ok(ForwardVars { grid, f_v, f_i, masked, f_vi, f_iv, f_r, gates, alpha, fused, image })
    }

    /// Fuse one pair. Sizes that are not a multiple of the patch are
    /// reflect-padded and the result cropped back.
    pub fn fuse(&self, pair: &ImagePair, sem: &Semantics) -> Result<Image> {
        Ok(self.fuse_with(pair, sem, &FuseOptions::default())?.0)
    }

    pub fn fuse_with(&self, pair: &ImagePair, sem: &Semantics, opts: &FuseOptions) -> Result<(Image, FeatureBundle)> {
        let (h, w) = pair.dims();
        let p = self.config.patch;
        let (hp, wp) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
        let mut g = Graph::inference();
        let vars = if (hp, wp) == (h, w) {
            self.forward(&mut g, &pair.vis, &pair.ir, sem, opts)?
        } else {
            let padded = Semantics {
                mask: MaskSemantics::from_mask(sem.mask.mask.pad_reflect_to(hp, wp), sem.mask.provenance),
                text: sem.text.clone(),
            };
            self.forward(&mut g, &pair.vis.pad_reflect_to(hp, wp), &pair.ir.pad_reflect_to(hp, wp), &padded, opts)?
        };
        let out = Image::from_tensor(g.value(vars.image)).stage("decode")?.crop(0, 0, h, w).clamp01();
        Ok((out, FeatureBundle::collect(&g, &vars)))
    }

    /// Fuse many pairs on up to `jobs` threads; order is preserved and a
    /// failing pair does not stop the others.
    pub fn fuse_batch(&self, pairs: &[ImagePair], semantics: &HashMap<String, Semantics>, jobs: usize) -> Vec<BatchOutcome> {
        let run = |pair: &ImagePair| {
            let start = Instant::now();
            let result = match semantics.get(&pair.id) {
                Some(sem) => self.fuse(pair, sem),
                None => Err(ModelError::MissingSemantics(pair.id.clone())),
            };
            BatchOutcome { id: pair.id.clone(), result, elapsed: start.elapsed() }
        };
        let jobs = jobs.max(1).min(pairs.len().max(1));
        if jobs == 1 {
            return pairs.iter().map(run).collect();
        }
        let chunk = pairs.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = pairs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("fuse worker panicked")).collect()
        })
    }

    pub fn tdaf_ids(&self) -> Vec<ParamId> {
        self.tdaf.ids()
    }

    pub fn to_checkpoint(&self, extra: BTreeMap<String, String>) -> Checkpoint {
        let mut meta = self.config.to_meta(self.variant);
        meta.extend(extra);
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (config, variant) = ModelConfig::from_meta(&ckpt.meta)?;
        let mut model = Self::new(config, variant)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: BTreeMap<String, String>) -> Result<()> {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &self.to_checkpoint(extra))?;
        crate::sig::write_atomic(path, &bytes).map_err(CheckpointError::Io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let f = fs::File::open(path).map_err(CheckpointError::Io)?;
        let ckpt = read_checkpoint(&mut BufReader::new(f))?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }
}

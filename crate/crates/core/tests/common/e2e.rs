//! Whole-model checks: finite differences, gradient coverage and ablation invariances.

use textfuse::image::Image;
use textfuse::io::synth_pair;
use textfuse::loss::{luminance, sobel_magnitude, total_loss, LossWeights};
use textfuse::model::{FuseOptions, FusionModel, ImagePair, ModelConfig, ModelError, Semantics, Variant};
use textfuse::nn::tokens_to_grid;
use textfuse::sig::fixtures::HashTextEncoder;
use textfuse::sig::{embed_text, BinaryMask, MaskProvenance, MaskSemantics, TextDescription};
use textfuse::tensor::{check_param_gradients, GradCheckReport, Graph};

use super::{perturb, uniform};

pub fn tiny_config() -> ModelConfig {
    ModelConfig { patch: 4, dim: 8, heads: 2, text_dim: 6, depth: 1, gate_kernel: 3, base_size: 16, seed: 5 }
}

pub fn semantics_for(pair: &ImagePair, region: [usize; 4], text_dim: usize) -> Semantics {
    let (h, w) = pair.dims();
    let [t, l, rh, rw] = region;
    let mask = MaskSemantics::from_mask(BinaryMask::rect(h, w, t, l, rh, rw), MaskProvenance::Union);
    let text = embed_text(&TextDescription::new("a car parked on a street"), &HashTextEncoder::new(text_dim)).unwrap();
    Semantics { mask, text }
}

pub fn synth(id: &str, size: usize, text_dim: usize) -> (ImagePair, Semantics) {
    let s = synth_pair(id, 0, size, size);
    let sem = semantics_for(&s.pair, s.region, text_dim);
    (s.pair, sem)
}

/// Smallest |pre-activation| of the spatial-weight ReLU; finite differences
/// are only meaningful when every input sits away from the kink.
pub fn relu_margin(model: &FusionModel, pair: &ImagePair, sem: &Semantics) -> f64 {
    let (_, feats) = model.fuse_with(pair, sem, &FuseOptions::default()).unwrap();
    let mut g = Graph::inference();
    let fr = g.constant(feats.f_r.unwrap()).unwrap();
    let map = tokens_to_grid(&mut g, fr, feats.grid).unwrap();
    let h = model.tdaf.sa1.forward(&mut g, model.store(), map).unwrap();
    g.value(h).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

pub fn min_sobel(img: &Image) -> f64 {
    let mut g = Graph::inference();
    let x = g.constant(img.to_tensor()).unwrap();
    let y = luminance(&mut g, x).unwrap();
    let m = sobel_magnitude(&mut g, y).unwrap();
    g.value(m).data().iter().fold(f64::INFINITY, |a, b| a.min(*b))
}

/// Parameter gradients of the total loss through the whole tiny model.
pub fn end_to_end_report() -> GradCheckReport {
    let (pair, sem) = synth("f", 16, 6);
    let mut model = FusionModel::new(tiny_config(), Variant::Full).unwrap();
    // Alternate channels fully active / fully inactive so both ReLU regimes are covered.
    let bias = model.tdaf.sa1.bias;
    for (i, b) in model.store_mut().get_mut(bias).value.data_mut().iter_mut().enumerate() {
        *b = if i % 2 == 0 { 0.1 } else { -0.1 };
    }
    // A textured output keeps every Sobel magnitude away from the non-smooth point at zero.
    let unembed = model.decoder.unembed.proj.weight;
    perturb(model.store_mut(), unembed, 77, 0.3);
    let margin = relu_margin(&model, &pair, &sem);
    assert!(margin > 1e-3, "ReLU inputs within {margin} of the kink");
    let edges = min_sobel(&model.fuse(&pair, &sem).unwrap());
    assert!(edges > 1e-2, "Sobel magnitude {edges} too close to zero");
    let ids: Vec<_> = model.store().ids().collect();
    let m = model.clone();
    check_param_gradients(
        model.store_mut(),
        &ids,
        |g, store| {
            let mut local = m.clone();
            *local.store_mut() = store.clone();
            let v = local.forward(g, &pair.vis, &pair.ir, &sem, &FuseOptions::default()).map_err(|e| match e {
                ModelError::Stage { source, .. } => source,
                e => panic!("{e}"),
            })?;
            Ok(total_loss(g, v.image, &pair.vis, &pair.ir, &LossWeights::default())?.total)
        },
        1e-4,
        13,
    )
    .unwrap()
}

pub struct Coverage {
    pub live: usize,
    pub total: usize,
    pub live_tensors: usize,
    pub tensors: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        self.live as f64 / self.total as f64
    }
}

/// Parameter elements with a nonzero gradient after one backward pass at the base size.
pub fn coverage(config: &ModelConfig, variant: Variant) -> Coverage {
    let (pair, sem) = synth("g", config.base_size, config.text_dim);
    let mut model = FusionModel::new(config.clone(), variant).unwrap();
    let mut g = Graph::new();
    let v = model.forward(&mut g, &pair.vis, &pair.ir, &sem, &FuseOptions::default()).unwrap();
    let loss = total_loss(&mut g, v.image, &pair.vis, &pair.ir, &LossWeights::default()).unwrap();
    g.backward_into(loss.total, model.store_mut()).unwrap();
    let mut c = Coverage { live: 0, total: 0, live_tensors: 0, tensors: model.store().len() };
    for p in model.store().iter() {
        let n = p.grad.as_ref().map_or(0, |g| g.iter().filter(|v| **v != 0.0).count());
        c.live += n;
        c.total += p.value.numel();
        c.live_tensors += usize::from(n > 0);
    }
    c
}

/// `no-gaf` output is bit-identical after perturbing every fusion-stage parameter,
/// while the full model's output changes.
pub fn no_gaf_ignores_fusion_parameters(config: &ModelConfig, size: usize) -> Result<(), String> {
    let (pair, sem) = synth("a", size, config.text_dim);
    let perturbed = |variant| {
        let mut model = FusionModel::new(config.clone(), variant).unwrap();
        let before = model.fuse(&pair, &sem).unwrap();
        for (i, id) in model.tdaf_ids().into_iter().enumerate() {
            perturb(model.store_mut(), id, 900 + i as u64, 1.0);
        }
        (before, model.fuse(&pair, &sem).unwrap())
    };
    let (before, after) = perturbed(Variant::NoGaf);
    if before.data() != after.data() {
        return Err("no-gaf output changed with fusion parameters".into());
    }
    let (before, after) = perturbed(Variant::Full);
    if before.data() == after.data() {
        return Err("full output did not depend on fusion parameters".into());
    }
    Ok(())
}

/// `no-tivr` and `full` share every stage except the spatial weights: injecting
/// the same α makes their outputs bit-identical, and without injection they differ.
pub fn no_tivr_differs_only_through_alpha(config: &ModelConfig, size: usize) -> Result<(), String> {
    let (pair, sem) = synth("b", size, config.text_dim);
    let full = FusionModel::new(config.clone(), Variant::Full).unwrap();
    let mut ablated = FusionModel::new(config.clone(), Variant::NoTivr).unwrap();
    let bypass = ablated.bypass.clone().ok_or("no-tivr has no bypass")?;
    perturb(ablated.store_mut(), bypass.weight, 1, 0.5);
    let (out_full, feats) = full.fuse_with(&pair, &sem, &FuseOptions::default()).unwrap();
    let (out_abl, feats_abl) = ablated.fuse_with(&pair, &sem, &FuseOptions::default()).unwrap();
    if feats.alpha == feats_abl.alpha || out_full.data() == out_abl.data() {
        return Err("no-tivr matches full without α injection".into());
    }
    if feats.f_vi != feats_abl.f_vi || feats.gates != feats_abl.gates {
        return Err("no-tivr differs from full before the spatial weights".into());
    }
    let n = feats.grid.len();
    for alpha in [feats.alpha.clone().unwrap(), uniform(&[n, 1], 3, 0.0, 1.0)] {
        let opts = FuseOptions { alpha: Some(alpha) };
        let (a, fa) = full.fuse_with(&pair, &sem, &opts).unwrap();
        let (b, fb) = ablated.fuse_with(&pair, &sem, &opts).unwrap();
        if a.data() != b.data() || fa.fused != fb.fused {
            return Err("outputs differ under the same α".into());
        }
    }
    let opts = FuseOptions { alpha: feats.alpha.clone() };
    if full.fuse_with(&pair, &sem, &opts).unwrap().0.data() != out_full.data() {
        return Err("injecting the model's own α changed the output".into());
    }
    Ok(())
}

//! Stage equations against plain-loop evaluation; each returns the max abs error.

use textfuse::model::{gated_fusion, Mgca, Streams, Tdaf};
use textfuse::nn::{CrossAttention, Init, TokenGrid};
use textfuse::tensor::{Graph, ParamStore, Tensor};

use super::{conv, cross_attention_ref, linear_ref, map_to_tokens, perturb, randn, sigmoid, tokens_to_map, uniform};

pub fn max_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn randomize_ca(store: &mut ParamStore, ca: &CrossAttention, seed: u64) {
    for (i, l) in [&ca.query, &ca.key, &ca.value, &ca.output].into_iter().enumerate() {
        perturb(store, l.weight, seed + 2 * i as u64, 0.4);
        perturb(store, l.bias, seed + 2 * i as u64 + 1, 0.3);
    }
}

/// Mask-guided cross reconstruction: four independent cross-attentions and their sums.
pub fn mgca_error() -> f64 {
    let (n, d, heads) = (6, 8, 2);
    let mut store = ParamStore::new();
    let mgca = Mgca::new(&mut store, &Init::new(3), "mgca", d, heads).unwrap();
    for (i, ca) in [&mgca.vi_fg, &mgca.vi_bg, &mgca.iv_fg, &mgca.iv_bg].into_iter().enumerate() {
        randomize_ca(&mut store, ca, 100 * i as u64);
    }
    let raw: Vec<Tensor> = (0..6).map(|i| randn(&[n, d], 50 + i)).collect();
    let mut g = Graph::inference();
    let v: Vec<_> = raw.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let s = Streams { vis: v[0], ir: v[1], vis_fg: v[2], vis_bg: v[3], ir_fg: v[4], ir_bg: v[5], grid: TokenGrid::new(2, 3) };
    let r = mgca.cross_reconstruct(&mut g, &store, &s).unwrap();
    let x = |i: usize| raw[i].data();
    let vi_fg = cross_attention_ref(&store, &mgca.vi_fg, x(2), x(4), n, n);
    let vi_bg = cross_attention_ref(&store, &mgca.vi_bg, x(3), x(5), n, n);
    let iv_fg = cross_attention_ref(&store, &mgca.iv_fg, x(4), x(2), n, n);
    let iv_bg = cross_attention_ref(&store, &mgca.iv_bg, x(5), x(3), n, n);
    let vi: Vec<f64> = vi_fg.iter().zip(&vi_bg).map(|(a, b)| a + b).collect();
    let iv: Vec<f64> = iv_fg.iter().zip(&iv_bg).map(|(a, b)| a + b).collect();
    [
        max_err(g.value(r.vi_fg).data(), &vi_fg),
        max_err(g.value(r.iv_bg).data(), &iv_bg),
        max_err(g.value(r.vi).data(), &vi),
        max_err(g.value(r.iv).data(), &iv),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

pub struct TdafCase {
    pub store: ParamStore,
    pub tdaf: Tdaf,
    pub grid: TokenGrid,
    pub d: usize,
    pub dt: usize,
}

pub fn tdaf_case(kernel: usize, seed: u64) -> TdafCase {
    let (d, dt, heads, grid) = (6, 5, 3, TokenGrid::new(3, 4));
    let mut store = ParamStore::new();
    let tdaf = Tdaf::new(&mut store, &Init::new(seed), "tdaf", d, dt, heads, kernel).unwrap();
    randomize_ca(&mut store, &tdaf.ca, seed + 10);
    perturb(&mut store, tdaf.text_proj.weight, seed + 20, 0.5);
    perturb(&mut store, tdaf.text_proj.bias, seed + 21, 0.5);
    for (i, c) in [&tdaf.gate_v, &tdaf.gate_i, &tdaf.sa1, &tdaf.sa2].into_iter().enumerate() {
        perturb(&mut store, c.weight, seed + 30 + 2 * i as u64, 0.4);
        perturb(&mut store, c.bias, seed + 31 + 2 * i as u64, 0.3);
    }
    TdafCase { store, tdaf, grid, d, dt }
}

/// Text-informed reconstruction: concatenated streams attend to projected text tokens.
pub fn tivr_error() -> f64 {
    let c = tdaf_case(3, 1);
    let n = c.grid.len();
    let (fvi, fiv, ft) = (randn(&[n, c.d], 1), randn(&[n, c.d], 2), randn(&[4, c.dt], 3));
    let mut g = Graph::inference();
    let (a, b, t) = (g.constant(fvi.clone()).unwrap(), g.constant(fiv.clone()).unwrap(), g.constant(ft.clone()).unwrap());
    let fr = c.tdaf.text_informed_reconstruction(&mut g, &c.store, a, b, t).unwrap();
    let mut q = Vec::with_capacity(n * 2 * c.d);
    for i in 0..n {
        q.extend_from_slice(&fvi.data()[i * c.d..(i + 1) * c.d]);
        q.extend_from_slice(&fiv.data()[i * c.d..(i + 1) * c.d]);
    }
    let kv = linear_ref(&c.store, &c.tdaf.text_proj, ft.data(), 4);
    max_err(g.value(fr).data(), &cross_attention_ref(&c.store, &c.tdaf.ca, &q, &kv, n, 4))
}

/// Modality gates: sigmoid of a same-size convolution of the summed streams.
pub fn gate_error(kernel: usize) -> f64 {
    let c = tdaf_case(kernel, kernel as u64);
    let n = c.grid.len();
    let t: Vec<Tensor> = (0..4).map(|i| randn(&[n, c.d], 10 + i)).collect();
    let mut g = Graph::inference();
    let v: Vec<_> = t.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
    let (gv, gi) = c.tdaf.compute_gates(&mut g, &c.store, v[0], v[1], v[2], v[3], c.grid).unwrap();
    let mut worst = 0.0f64;
    for (out, conv_p, a, b) in [(gv, &c.tdaf.gate_v, 0, 1), (gi, &c.tdaf.gate_i, 2, 3)] {
        let sum: Vec<f64> = t[a].data().iter().zip(t[b].data()).map(|(x, y)| x + y).collect();
        let map = tokens_to_map(&sum, n, c.d);
        let w = c.store.value(conv_p.weight).data();
        let bias = c.store.value(conv_p.bias).data();
        let r = conv(&map, w, bias, c.d, c.d, c.grid.rows, c.grid.cols, kernel);
        let want: Vec<f64> = map_to_tokens(&r, n, c.d).into_iter().map(sigmoid).collect();
        worst = worst.max(max_err(g.value(out).data(), &want));
    }
    worst
}

/// Spatial weights: conv, ReLU, conv, sigmoid.
pub fn alpha_error() -> f64 {
    let c = tdaf_case(3, 7);
    let n = c.grid.len();
    let fr = randn(&[n, c.d], 4);
    let mut g = Graph::inference();
    let x = g.constant(fr.clone()).unwrap();
    let alpha = c.tdaf.spatial_attention(&mut g, &c.store, x, c.grid).unwrap();
    assert_eq!(g.shape(alpha), &[n, 1]);
    let map = tokens_to_map(fr.data(), n, c.d);
    let (s1, s2) = (&c.tdaf.sa1, &c.tdaf.sa2);
    let h = conv(&map, c.store.value(s1.weight).data(), c.store.value(s1.bias).data(), c.d, c.d / 2, 3, 4, 1);
    let h: Vec<f64> = h.into_iter().map(|v| v.max(0.0)).collect();
    let a = conv(&h, c.store.value(s2.weight).data(), c.store.value(s2.bias).data(), c.d / 2, 1, 3, 4, 1);
    let want: Vec<f64> = a.into_iter().map(sigmoid).collect();
    max_err(g.value(alpha).data(), &want)
}

/// Gated fusion: `α(1+G_v)(F_vi+F_v) + (1−α)(1+G_i)(F_iv+F_i)` elementwise.
pub fn fusion_error() -> f64 {
    let (n, d) = (7, 5);
    let t: Vec<Tensor> = (0..6).map(|i| randn(&[n, d], 20 + i)).collect();
    let alpha = uniform(&[n, 1], 9, 0.0, 1.0);
    let mut g = Graph::inference();
    let v: Vec<_> = t.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
    let a = g.constant(alpha.clone()).unwrap();
    let f = gated_fusion(&mut g, v[0], v[1], v[2], v[3], v[4], v[5], a).unwrap();
    let x = |k: usize, i: usize| t[k].data()[i];
    let want: Vec<f64> = (0..n * d)
        .map(|i| {
            let al = alpha.data()[i / d];
            al * (1.0 + x(4, i)) * (x(0, i) + x(1, i)) + (1.0 - al) * (1.0 + x(5, i)) * (x(2, i) + x(3, i))
        })
        .collect();
    max_err(g.value(f).data(), &want)
}

//! Training objective: structural similarity, gradient, intensity and colour terms.
//!
//! All four terms compare luminance `Y` (BT.601) except the colour term,
//! which compares BT.601 chroma. The gradient and intensity targets take the
//! elementwise maximum over the two sources.

use crate::image::{Image, LUMA};
use crate::tensor::{shape_err, Graph, Result, Tensor, TensorError, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// BT.601 chroma rows `[Cb; Cr]` applied to RGB, plus 0.5 offset.
pub const CHROMA: [[f64; 3]; 2] = [[-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ssim: f64,
    pub grad: f64,
    pub int: f64,
    pub color: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 1.0, grad: 10.0, int: 10.0, color: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let w = [self.ssim, self.grad, self.int, self.color];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(format!("loss weights must be finite and non-negative, got {w:?}"));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err("at least one loss weight must be positive".into());
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { ssim: self.ssim * k, grad: self.grad * k, int: self.int * k, color: self.color * k }
    }
}

/// Scalar values of each term and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ssim: f64,
    pub grad: f64,
    pub int: f64,
    pub color: f64,
    pub total: f64,
}

/// Graph handles for each term and the total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ssim: Var,
    pub grad: Var,
    pub int: Var,
    pub color: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Var| g.value(x).data()[0];
        LossTerms { ssim: v(self.ssim), grad: v(self.grad), int: v(self.int), color: v(self.color), total: v(self.total) }
    }
}

fn image_var(g: &mut Graph, img: &Image) -> Result<Var> {
    g.constant(img.to_tensor())
}

/// `[C, H, W]` → `[1, 1, H, W]` luminance (identity for one channel).
pub fn luminance(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let y = match s[0] {
        1 => x,
        3 => {
            let k = g.constant(Tensor::new([3, 1, 1], LUMA.to_vec())?)?;
            let p = g.mul(x, k)?;
            g.sum(p, Some(0))?
        }
        c => return Err(shape_err("luminance", format!("{c}-channel image"))),
    };
    g.reshape(y, &[1, 1, h, w])
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.iter().map(|v| v / s).collect()
}

fn gaussian_kernel(size: usize, sigma: f64) -> Tensor {
    let t = gaussian_taps(size, sigma);
    let data = (0..size * size).map(|i| t[i / size] * t[i % size]).collect();
    Tensor::new([1, 1, size, size], data).expect("kernel dims")
}

/// Mean SSIM of two `[1, 1, H, W]` maps over all valid window positions.
pub fn ssim(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(shape_err("ssim", format!("{}x{} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", s[2], s[3])));
    }
    let k = g.constant(gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA))?;
    let blur = |g: &mut Graph, x: Var| g.conv2d(x, k, None, 1, 0);
    let mu_a = blur(g, a)?;
    let mu_b = blur(g, b)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = blur(g, aa)?;
    let e_bb = blur(g, bb)?;
    let e_ab = blur(g, ab)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let n1 = g.affine(mu_ab, 2.0, SSIM_C1)?;
    let n2 = g.affine(cov, 2.0, SSIM_C2)?;
    let num = g.mul(n1, n2)?;
    let d1 = g.add(mu_aa, mu_bb)?;
    let d1 = g.affine(d1, 1.0, SSIM_C1)?;
    let d2 = g.add(var_a, var_b)?;
    let d2 = g.affine(d2, 1.0, SSIM_C2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    g.mean(map, None)
}

/// `0.5·(1 − SSIM(Y_f, Y_vis)) + 0.5·(1 − SSIM(Y_f, ir))`.
pub fn ssim_loss(g: &mut Graph, fused: Var, vis: &Image, ir: &Image) -> Result<Var> {
    let yf = luminance(g, fused)?;
    let v = image_var(g, vis)?;
    let yv = luminance(g, v)?;
    let i = image_var(g, ir)?;
    let yi = luminance(g, i)?;
    let s1 = ssim(g, yf, yv)?;
    let s2 = ssim(g, yf, yi)?;
    let s = g.add(s1, s2)?;
    g.affine(s, -0.5, 1.0)
}

fn sobel_kernel() -> Tensor {
    #[rustfmt::skip]
    let data = vec![
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ];
    Tensor::new([2, 1, 3, 3], data).expect("kernel dims")
}

/// Sobel magnitude of a `[1, 1, H, W]` map over the valid interior, `[1, 1, H-2, W-2]`.
pub fn sobel_magnitude(g: &mut Graph, y: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    if s[2] < 3 || s[3] < 3 {
        return Err(shape_err("sobel", format!("{}x{} image smaller than 3x3", s[2], s[3])));
    }
    let k = g.constant(sobel_kernel())?;
    let d = g.conv2d(y, k, None, 1, 0)?;
    let sq = g.mul(d, d)?;
    let m = g.sum(sq, Some(1))?;
    let m = g.pow(m, 0.5)?;
    g.reshape(m, &[1, 1, s[2] - 2, s[3] - 2])
}

/// `mean |∇Y_f − max(∇Y_vis, ∇ir)|`.
pub fn gradient_loss(g: &mut Graph, fused: Var, vis: &Image, ir: &Image) -> Result<Var> {
    let yf = luminance(g, fused)?;
    let gf = sobel_magnitude(g, yf)?;
    let target = {
        let mut cg = Graph::inference();
        let v = image_var(&mut cg, vis)?;
        let yv = luminance(&mut cg, v)?;
        let gv = sobel_magnitude(&mut cg, yv)?;
        let i = image_var(&mut cg, ir)?;
        let yi = luminance(&mut cg, i)?;
        let gi = sobel_magnitude(&mut cg, yi)?;
        let t = cg.maximum(gv, gi)?;
        cg.value(t).clone()
    };
    let t = g.constant(target)?;
    let d = g.sub(gf, t)?;
    let d = g.abs(d)?;
    g.mean(d, None)
}

/// `mean |Y_f − max(Y_vis, ir)|`.
pub fn intensity_loss(g: &mut Graph, fused: Var, vis: &Image, ir: &Image) -> Result<Var> {
    let yf = luminance(g, fused)?;
    let target = {
        let lv = vis.luminance();
        let data = lv.data().iter().zip(ir.data()).map(|(a, b)| a.max(*b)).collect();
        Tensor::new([1, 1, vis.height(), vis.width()], data)?
    };
    let t = g.constant(target)?;
    let d = g.sub(yf, t)?;
    let d = g.abs(d)?;
    g.mean(d, None)
}

/// `[3, H, W]` → `[2, H, W]` chroma (Cb, Cr).
pub fn chroma(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err("color_loss", format!("expected a 3-channel image, got {s:?}")));
    }
    let flat = g.reshape(x, &[3, s[1] * s[2]])?;
    let m = g.constant(Tensor::new([2, 3], CHROMA.concat())?)?;
    let c = g.matmul(m, flat)?;
    let c = g.affine(c, 1.0, 0.5)?;
    g.reshape(c, &[2, s[1], s[2]])
}

/// `mean |CbCr(f) − CbCr(vis)|`.
pub fn color_loss(g: &mut Graph, fused: Var, vis: &Image) -> Result<Var> {
    let cf = chroma(g, fused)?;
    let v = image_var(g, vis)?;
    let cv = chroma(g, v)?;
    let d = g.sub(cf, cv)?;
    let d = g.abs(d)?;
    g.mean(d, None)
}

pub fn total_loss(g: &mut Graph, fused: Var, vis: &Image, ir: &Image, w: &LossWeights) -> Result<LossVars> {
    w.validate().map_err(|detail| TensorError::Attr { op: "total_loss", detail })?;
    let ssim = ssim_loss(g, fused, vis, ir)?;
    let grad = gradient_loss(g, fused, vis, ir)?;
    let int = intensity_loss(g, fused, vis, ir)?;
    let color = color_loss(g, fused, vis)?;
    let mut total = g.scale(ssim, w.ssim)?;
    for (term, k) in [(grad, w.grad), (int, w.int), (color, w.color)] {
        let t = g.scale(term, k)?;
        total = g.add(total, t)?;
    }
    Ok(LossVars { ssim, grad, int, color, total })
}

/// Evaluate every term for a fixed fused image.
pub fn evaluate(fused: &Image, vis: &Image, ir: &Image, w: &LossWeights) -> Result<LossTerms> {
    let mut g = Graph::inference();
    let f = image_var(&mut g, fused)?;
    let v = total_loss(&mut g, f, vis, ir, w)?;
    Ok(v.values(&g))
}

//! Fusion quality metrics: EN, SD, SCD, VIF and Qabf.
//!
//! Every metric works on BT.601 luminance scaled to [0, 255].

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use thiserror::Error;

use crate::image::{reflect_index, Image};
use crate::loss::gaussian_taps;

pub const VIF_SCALES: usize = 4;
pub const VIF_SIGMA: f64 = 2.0;
pub const VIF_WINDOW: usize = 13;
pub const VIF_NOISE_VAR: f64 = 2.0;
pub const VIF_MIN_SIDE: usize = 32;
pub const QABF_G: (f64, f64, f64) = (0.9994, -15.0, 0.5);
pub const QABF_A: (f64, f64, f64) = (0.9879, -22.0, 0.8);

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("VIF needs at least {VIF_MIN_SIDE}x{VIF_MIN_SIDE} pixels, got {0}x{1}")]
    TooSmall(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Row-major single-channel plane on the [0, 255] scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    pub fn from_image(img: &Image) -> Self {
        let y = img.luminance();
        Self { height: y.height(), width: y.width(), data: y.data().iter().map(|v| v * 255.0).collect() }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        self.data[reflect_index(y, self.height) * self.width + reflect_index(x, self.width)]
    }
}

fn same(a: &Gray, b: &Gray) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricError::Shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Shannon entropy (bits) of the 256-bin histogram of rounded gray levels.
pub fn entropy(f: &Gray) -> f64 {
    let mut hist = [0u64; 256];
    for &v in &f.data {
        hist[(v.round() as i64).clamp(0, 255) as usize] += 1;
    }
    let n = f.data.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(f: &Gray) -> f64 {
    let m = mean(&f.data);
    (f.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / f.data.len() as f64).sqrt()
}

/// Pearson correlation; 0 when either argument is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// `r(F − A, B) + r(F − B, A)`.
pub fn scd(f: &Gray, a: &Gray, b: &Gray) -> Result<f64> {
    same(f, a)?;
    same(f, b)?;
    let fa: Vec<f64> = f.data.iter().zip(&a.data).map(|(x, y)| x - y).collect();
    let fb: Vec<f64> = f.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(pearson(&fa, &b.data) + pearson(&fb, &a.data))
}

/// Separable Gaussian filter, same size, reflect borders.
fn blur(img: &Gray, taps: &[f64]) -> Gray {
    let r = (taps.len() / 2) as isize;
    let (h, w) = img.dims();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * img.at(y as isize, x as isize + k as isize - r)).sum();
        }
    }
    let tmp = Gray::new(h, w, tmp);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps.iter().enumerate().map(|(k, t)| t * tmp.at(y as isize + k as isize - r, x as isize)).sum();
        }
    }
    Gray::new(h, w, out)
}

fn decimate(img: &Gray) -> Gray {
    let (h, w) = (img.height.div_ceil(2), img.width.div_ceil(2));
    let data = (0..h * w).map(|i| img.data[(i / w) * 2 * img.width + (i % w) * 2]).collect();
    Gray::new(h, w, data)
}

fn zip_map(a: &Gray, b: &Gray, f: impl Fn(f64, f64) -> f64) -> Gray {
    Gray::new(a.height, a.width, a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect())
}

/// Pixel-domain VIF of `dist` against `reference`.
pub fn vif(reference: &Gray, dist: &Gray) -> Result<f64> {
    same(reference, dist)?;
    if reference.height < VIF_MIN_SIDE || reference.width < VIF_MIN_SIDE {
        return Err(MetricError::TooSmall(reference.height, reference.width));
    }
    let taps = gaussian_taps(VIF_WINDOW, VIF_SIGMA);
    let (mut r, mut d) = (reference.clone(), dist.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..VIF_SCALES {
        if scale > 0 {
            r = decimate(&blur(&r, &taps));
            d = decimate(&blur(&d, &taps));
        }
        let mu1 = blur(&r, &taps);
        let mu2 = blur(&d, &taps);
        let s11 = blur(&zip_map(&r, &r, |a, b| a * b), &taps);
        let s22 = blur(&zip_map(&d, &d, |a, b| a * b), &taps);
        let s12 = blur(&zip_map(&r, &d, |a, b| a * b), &taps);
        for i in 0..r.data.len() {
            let (m1, m2) = (mu1.data[i], mu2.data[i]);
            let mut var1 = (s11.data[i] - m1 * m1).max(0.0);
            let var2 = (s22.data[i] - m2 * m2).max(0.0);
            let cov = s12.data[i] - m1 * m2;
            let mut gain = cov / (var1 + 1e-10);
            let mut sv = var2 - gain * cov;
            if var1 < 1e-10 {
                gain = 0.0;
                sv = var2;
                var1 = 0.0;
            }
            if var2 < 1e-10 {
                gain = 0.0;
                sv = 0.0;
            }
            if gain < 0.0 {
                sv = var2;
                gain = 0.0;
            }
            let sv = sv.max(1e-10);
            num += (1.0 + gain * gain * var1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + var1 / VIF_NOISE_VAR).log10();
        }
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Mean of VIF against each source, plus the two per-source values.
pub fn vif_fusion(f: &Gray, a: &Gray, b: &Gray) -> Result<(f64, f64, f64)> {
    let va = vif(a, f)?;
    let vb = vif(b, f)?;
    Ok((0.5 * (va + vb), va, vb))
}

/// Sobel strength and orientation per pixel (reflect borders).
pub fn sobel_polar(img: &Gray) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = img.dims();
    let mut g = vec![0.0; h * w];
    let mut a = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dy: isize, dx: isize| img.at(y + dy, x + dx);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let i = y as usize * w + x as usize;
            g[i] = (gx * gx + gy * gy).sqrt();
            a[i] = if gx == 0.0 { FRAC_PI_2 } else { (gy / gx).atan() };
        }
    }
    (g, a)
}

fn sigmoid_const((gamma, kappa, sigma): (f64, f64, f64), v: f64) -> f64 {
    gamma / (1.0 + (kappa * (v - sigma)).exp())
}

fn edge_preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    (0..gs.len())
        .map(|i| {
            let g = if gs[i] == 0.0 || gf[i] == 0.0 {
                0.0
            } else if gs[i] > gf[i] {
                gf[i] / gs[i]
            } else {
                gs[i] / gf[i]
            };
            let a = 1.0 - (as_[i] - af[i]).abs() / FRAC_PI_2;
            sigmoid_const(QABF_G, g) * sigmoid_const(QABF_A, a)
        })
        .collect()
}

/// Edge-preservation score in [0, 1]; 0 when both sources are flat.
pub fn qabf(f: &Gray, a: &Gray, b: &Gray) -> Result<f64> {
    same(f, a)?;
    same(f, b)?;
    let (gf, af) = sobel_polar(f);
    let (ga, aa) = sobel_polar(a);
    let (gb, ab) = sobel_polar(b);
    let qa = edge_preservation(&ga, &aa, &gf, &af);
    let qb = edge_preservation(&gb, &ab, &gf, &af);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        num += qa[i] * ga[i] + qb[i] * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub id: String,
    pub en: f64,
    pub sd: f64,
    pub scd: f64,
    pub vif: f64,
    pub qabf: f64,
    pub vif_vis: f64,
    pub vif_ir: f64,
}

/// All metrics for one fused image against its sources.
pub fn evaluate(id: &str, fused: &Image, vis: &Image, ir: &Image) -> Result<MetricRecord> {
    let (f, a, b) = (Gray::from_image(fused), Gray::from_image(vis), Gray::from_image(ir));
    let (vif, vif_vis, vif_ir) = vif_fusion(&f, &a, &b)?;
    Ok(MetricRecord {
        id: id.to_string(),
        en: entropy(&f),
        sd: std_dev(&f),
        scd: scd(&f, &a, &b)?,
        vif,
        qabf: qabf(&f, &a, &b)?,
        vif_vis,
        vif_ir,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Sorted by id.
    pub records: Vec<MetricRecord>,
    pub mean: MetricRecord,
    /// Ids present in only some of the inputs, or that failed to evaluate.
    pub skipped: Vec<String>,
}

pub fn conventions() -> Vec<String> {
    vec![
        "gray = BT.601 luma (0.299 R + 0.587 G + 0.114 B) scaled to [0,255]".into(),
        "EN: 256 bins of round(gray), log base 2".into(),
        "SD: population standard deviation".into(),
        "SCD: r(F-A,B) + r(F-B,A), Pearson r := 0 for a constant argument".into(),
        format!(
            "VIF: pixel domain, {VIF_SCALES} scales, Gaussian sigma {VIF_SIGMA} ({VIF_WINDOW} taps, reflect), decimate by 2, sigma_n^2 {VIF_NOISE_VAR}; mean of VIF(vis,F) and VIF(ir,F)"
        ),
        format!(
            "Qabf: Sobel (reflect), (Gg,kg,sg) = {QABF_G:?}, (Ga,ka,sa) = {QABF_A:?}, weights = edge strength, flat sources := 0"
        ),
    ]
}

impl MetricReport {
    pub fn new(mut records: Vec<MetricRecord>, mut skipped: Vec<String>) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        skipped.sort();
        let n = records.len().max(1) as f64;
        let avg = |f: fn(&MetricRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let mean = MetricRecord {
            id: "mean".into(),
            en: avg(|r| r.en),
            sd: avg(|r| r.sd),
            scd: avg(|r| r.scd),
            vif: avg(|r| r.vif),
            qabf: avg(|r| r.qabf),
            vif_vis: avg(|r| r.vif_vis),
            vif_ir: avg(|r| r.vif_ir),
        };
        Self { records, mean, skipped }
    }

    fn rows(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().chain(std::iter::once(&self.mean))
    }

    /// `#`-prefixed conventions, a header, one row per image, then the mean.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for c in conventions() {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("id,EN,SD,SCD,VIF,Qabf,VIF_vis,VIF_ir\n");
        for r in self.rows() {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", r.id, r.en, r.sd, r.scd, r.vif, r.qabf, r.vif_vis, r.vif_ir);
        }
        s
    }

    pub fn to_text(&self) -> String {
        table(&self.rows().map(|r| (r.id.clone(), r.clone())).collect::<Vec<_>>(), "id", true)
            + &self.skipped.iter().map(|id| format!("skipped: {id}\n")).collect::<String>()
    }
}

/// Aligned table with EN, SD, SCD, VIF, Qabf columns; optional per-source VIF.
pub fn table(rows: &[(String, MetricRecord)], label: &str, per_source: bool) -> String {
    let mut s = String::new();
    for c in conventions() {
        let _ = writeln!(s, "# {c}");
    }
    let w = rows.iter().map(|(l, _)| l.len()).chain([label.len()]).max().unwrap_or(0);
    let _ = write!(s, "{label:<w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}", "EN", "SD", "SCD", "VIF", "Qabf");
    if per_source {
        let _ = write!(s, "  {:>8}  {:>8}", "VIF_vis", "VIF_ir");
    }
    s.push('\n');
    for (l, r) in rows {
        let _ = write!(s, "{l:<w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}", r.en, r.sd, r.scd, r.vif, r.qabf);
        if per_source {
            let _ = write!(s, "  {:>8.4}  {:>8.4}", r.vif_vis, r.vif_ir);
        }
        s.push('\n');
    }
    s
}

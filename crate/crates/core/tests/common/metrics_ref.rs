//! Metric formulas transcribed with plain loops, independent of the library path.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use textfuse::metrics::{Gray, QABF_A, QABF_G, VIF_NOISE_VAR, VIF_SCALES, VIF_SIGMA, VIF_WINDOW};

pub fn random_gray(h: usize, w: usize, seed: u64) -> Gray {
    Gray::new(h, w, super::uniform(&[h, w], seed, 0.0, 255.0).data().to_vec())
}

/// Smooth structure plus noise, so edges and local variance vary across the image.
pub fn scene(h: usize, w: usize, seed: u64) -> Gray {
    let noise = super::uniform(&[h, w], seed, -20.0, 20.0);
    let f = seed as f64 * 0.37 + 1.0;
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (128.0 + 60.0 * (x / (5.0 + f)).sin() * (y / (7.0 + f)).cos() + noise.data()[i]).clamp(0.0, 255.0)
        })
        .collect();
    Gray::new(h, w, data)
}

pub fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

pub fn px(g: &Gray, y: isize, x: isize) -> f64 {
    g.data[mirror(y, g.height) * g.width + mirror(x, g.width)]
}

pub fn entropy_ref(g: &Gray) -> f64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in &g.data {
        *counts.entry(v.round() as i64).or_default() += 1;
    }
    let n = g.data.len() as f64;
    counts.values().map(|&c| c as f64 / n).map(|p| -p * p.ln() / 2f64.ln()).sum()
}

pub fn sd_ref(g: &Gray) -> f64 {
    let n = g.data.len() as f64;
    let s: f64 = g.data.iter().sum();
    let ss: f64 = g.data.iter().map(|v| v * v).sum();
    (ss / n - (s / n) * (s / n)).sqrt()
}

pub fn corr_ref(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|y| y * y).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

pub fn scd_ref(f: &Gray, a: &Gray, b: &Gray) -> f64 {
    let d = |x: &Gray, y: &Gray| x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect::<Vec<_>>();
    corr_ref(&d(f, a), &b.data) + corr_ref(&d(f, b), &a.data)
}

pub fn gauss2d() -> Vec<Vec<f64>> {
    let r = (VIF_WINDOW / 2) as isize;
    let raw: Vec<Vec<f64>> = (-r..=r)
        .map(|dy| (-r..=r).map(|dx| (-((dy * dy + dx * dx) as f64) / (2.0 * VIF_SIGMA * VIF_SIGMA)).exp()).collect())
        .collect();
    let total: f64 = raw.iter().flatten().sum();
    raw.into_iter().map(|row| row.into_iter().map(|v| v / total).collect()).collect()
}

pub fn filter2d(g: &Gray, k: &[Vec<f64>]) -> Gray {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; g.data.len()];
    for y in 0..g.height {
        for x in 0..g.width {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    acc += w * px(g, y as isize + i as isize - r, x as isize + j as isize - r);
                }
            }
            out[y * g.width + x] = acc;
        }
    }
    Gray::new(g.height, g.width, out)
}

pub fn vif_ref(r: &Gray, d: &Gray) -> f64 {
    let k = gauss2d();
    let (mut r, mut d) = (r.clone(), d.clone());
    let (mut info_d, mut info_r) = (0.0, 0.0);
    for s in 0..VIF_SCALES {
        if s > 0 {
            let down = |g: &Gray| {
                let b = filter2d(g, &k);
                let (h, w) = (g.height.div_ceil(2), g.width.div_ceil(2));
                let mut v = Vec::new();
                for y in 0..h {
                    for x in 0..w {
                        v.push(b.data[2 * y * g.width + 2 * x]);
                    }
                }
                Gray::new(h, w, v)
            };
            r = down(&r);
            d = down(&d);
        }
        let prod = |a: &Gray, b: &Gray| Gray::new(a.height, a.width, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect());
        let (mr, md) = (filter2d(&r, &k), filter2d(&d, &k));
        let (err, edd, erd) = (filter2d(&prod(&r, &r), &k), filter2d(&prod(&d, &d), &k), filter2d(&prod(&r, &d), &k));
        for i in 0..r.data.len() {
            let sr = (err.data[i] - mr.data[i].powi(2)).max(0.0);
            let sd = (edd.data[i] - md.data[i].powi(2)).max(0.0);
            let c = erd.data[i] - mr.data[i] * md.data[i];
            let (g, sv, sr) = if sr < 1e-10 {
                (0.0, sd, 0.0)
            } else if sd < 1e-10 {
                (0.0, 0.0, sr)
            } else {
                let g = c / (sr + 1e-10);
                if g < 0.0 { (0.0, sd, sr) } else { (g, sd - g * c, sr) }
            };
            let sv = if sv < 1e-10 { 1e-10 } else { sv };
            info_d += (1.0 + g * g * sr / (sv + VIF_NOISE_VAR)).log10();
            info_r += (1.0 + sr / VIF_NOISE_VAR).log10();
        }
    }
    info_d / info_r
}

pub fn sobel_ref(g: &Gray) -> (Vec<f64>, Vec<f64>) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (mut mag, mut ang) = (Vec::new(), Vec::new());
    for y in 0..g.height as isize {
        for x in 0..g.width as isize {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = px(g, y + i as isize - 1, x + j as isize - 1);
                    sx += kx[i][j] * v;
                    sy += ky[i][j] * v;
                }
            }
            mag.push(sx.hypot(sy));
            ang.push(if sx == 0.0 { FRAC_PI_2 } else { (sy / sx).atan() });
        }
    }
    (mag, ang)
}

pub fn qabf_ref(f: &Gray, a: &Gray, b: &Gray) -> f64 {
    let (gf, af) = sobel_ref(f);
    let q = |gs: &[f64], as_: &[f64], i: usize| {
        let g = if gs[i] == 0.0 || gf[i] == 0.0 { 0.0 } else { gs[i].min(gf[i]) / gs[i].max(gf[i]) };
        let alpha = 1.0 - (as_[i] - af[i]).abs() / FRAC_PI_2;
        let qg = QABF_G.0 / (1.0 + (QABF_G.1 * (g - QABF_G.2)).exp());
        let qa = QABF_A.0 / (1.0 + (QABF_A.1 * (alpha - QABF_A.2)).exp());
        qg * qa
    };
    let (ga, aa) = sobel_ref(a);
    let (gb, ab) = sobel_ref(b);
    let num: f64 = (0..gf.len()).map(|i| q(&ga, &aa, i) * ga[i] + q(&gb, &ab, i) * gb[i]).sum();
    let den: f64 = (0..gf.len()).map(|i| ga[i] + gb[i]).sum();
    num / den
}

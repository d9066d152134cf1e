//! Shared helpers for integration tests: seeded tensors and plain-loop reference maths.
#![allow(dead_code)]

pub mod e2e;
pub mod metrics_ref;
pub mod ops;
pub mod stages;

use textfuse::tensor::rng::{normal_vec, stream, uniform_vec};
use textfuse::tensor::Tensor;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, &[n as u64, 17]), n)).unwrap()
}

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(&mut stream(seed, &[n as u64, 29]), n, lo, hi)).unwrap()
}

pub fn vecn(n: usize, seed: u64) -> Vec<f64> {
    normal_vec(&mut stream(seed, &[n as u64, 31]), n)
}

/// Row-major `[n, k] · [k, m]`.
pub fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// `x·W + b` with `W` `[k, m]`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut y = mm(x, w, n, k, m);
    for i in 0..n {
        for j in 0..m {
            y[i * m + j] += b[j];
        }
    }
    y
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Multi-head scaled dot-product attention over `[n, d]`, `[m, d]`, `[m, dv]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, dv: usize, heads: usize) -> Vec<f64> {
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..m)
                .map(|j| (0..dh).map(|t| q[i * d + h * dh + t] * k[j * d + h * dh + t]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dvh {
                out[i * dv + h * dvh + t] = (0..m).map(|j| e[j] / z * v[j * dv + h * dvh + t]).sum();
            }
        }
    }
    out
}

/// Stride-1 zero-padded convolution of `[cin, h, w]` with `[cout, cin, k, k]`.
pub fn conv(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, h: usize, wd: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * wd];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..wd {
                let mut s = b[o];
                for c in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let (sy, sx) = (y as isize + dy as isize - pad, xx as isize + dx as isize - pad);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                s += w[((o * cin + c) * k + dy) * k + dx] * x[(c * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = s;
            }
        }
    }
    out
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= tol, "{what}[{i}]: {a} vs {b}");
    }
}

use textfuse::nn::{CrossAttention, Linear};
use textfuse::tensor::{ParamId, ParamStore};

/// Replace a parameter by `scale·N(0,1)` values.
pub fn perturb(store: &mut ParamStore, id: ParamId, seed: u64, scale: f64) {
    let shape = store.value(id).shape().to_vec();
    store.get_mut(id).value = randn(&shape, seed).map(|v| v * scale);
}

pub fn linear_ref(store: &ParamStore, l: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    affine(x, store.value(l.weight).data(), store.value(l.bias).data(), rows, l.in_dim, l.out_dim)
}

/// `W_O · MHA(x_q W_Q, x_kv W_K, x_kv W_V)` by plain loops.
pub fn cross_attention_ref(store: &ParamStore, ca: &CrossAttention, q_in: &[f64], kv_in: &[f64], n: usize, m: usize) -> Vec<f64> {
    let q = linear_ref(store, &ca.query, q_in, n);
    let k = linear_ref(store, &ca.key, kv_in, m);
    let v = linear_ref(store, &ca.value, kv_in, m);
    let d = ca.query.out_dim;
    let h = attention(&q, &k, &v, n, m, d, d, ca.heads);
    linear_ref(store, &ca.output, &h, n)
}

/// `[N, D]` row-major tokens to `[D, rows, cols]`.
pub fn tokens_to_map(t: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            out[c * n + i] = t[i * d + c];
        }
    }
    out
}

pub fn map_to_tokens(m: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            out[i * d + c] = m[c * n + i];
        }
    }
    out
}

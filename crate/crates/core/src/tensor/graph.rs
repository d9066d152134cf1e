use std::collections::HashMap;

use super::linalg::{gemm, strided_gemm};
use super::{shape_err, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// The operation that produced a node, for introspection and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Conv2d,
    Add,
    Sub,
    Mul,
    Div,
    MaxElementwise,
    Affine,
    Concat,
    Softmax,
    Sigmoid,
    Relu,
    Gelu,
    Abs,
    Pow,
    LayerNorm,
    Reshape,
    Transpose,
    Slice,
    ReduceSum,
    ReduceMean,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "max_elementwise",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize },
    Binary { kind: Binary, a: Var, b: Var },
    Affine { x: Var, scale: f64 },
    Concat { xs: Vec<Var>, axis: usize },
    Softmax { x: Var },
    Sigmoid { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Abs { x: Var },
    Pow { x: Var, exponent: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Binary { kind, .. } => match kind {
                Binary::Add => OpKind::Add,
                Binary::Sub => OpKind::Sub,
                Binary::Mul => OpKind::Mul,
                Binary::Div => OpKind::Div,
                Binary::Max => OpKind::MaxElementwise,
            },
            Op::Affine { .. } => OpKind::Affine,
            Op::Concat { .. } => OpKind::Concat,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Abs { .. } => OpKind::Abs,
            Op::Pow { .. } => OpKind::Pow,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Transpose,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum { .. } => OpKind::ReduceSum,
            Op::Mean { .. } => OpKind::ReduceMean,
            Op::Attention { .. } => OpKind::Attention,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A per-forward-pass computation tape.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller indices; [`Graph::backward`] walks the tape in reverse and
/// consumes it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. an input created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Add parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index into a broadcast input.
/// `None` when the shapes are identical.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let nd = out.len();
    let off = nd - inp.len();
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        if inp[i] != 1 {
            strides[off + i] = s;
        }
        s *= inp[i];
    }
    Some(walk_strided(out, &strides))
}

/// Flat offsets `Σ idx[d]·strides[d]` for every multi-index of `shape`, row-major.
fn walk_strided(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel(shape);
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut cur = 0usize;
    let mut map = Vec::with_capacity(total);
    for _ in 0..total {
        map.push(cur);
        for d in (0..nd).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            cur -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let map = walk_strided(&out_shape, &strides);
    (out_shape, map)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(data: &mut [f64], row: usize) {
    for r in data.chunks_mut(row) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        r.iter_mut().for_each(|v| *v *= inv);
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.hw_out();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * hw..][..hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.hw_out();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * hw..][..hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// A tape on which parameters are differentiable.
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that treats parameters as constants; nothing is retained for backward.
    pub fn inference() -> Self {
        Self { frozen: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, false)
    }

    /// An input leaf; with `requires_grad` its gradient is reported by backward.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "input" });
        }
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Bring a parameter onto the tape. Repeated calls return the same node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let (op, requires_grad) = if self.frozen { (Op::Leaf, false) } else { (Op::Param(id), true) };
        self.nodes.push(Node { value, op, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m,k]×[k,n]`, `[b,m,k]×[b,k,n]` or `[b,m,k]×[k,n]` (shared right operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, shared) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], true),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], false),
            (3, 2) if sa[2] == sb[0] => (sa[0], sa[1], sa[2], sb[1], true),
            _ => return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let bslice = if shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                gemm(m, k, n, &ad[bi * m * k..], false, bslice, false, &mut out[bi * m * n..], false);
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b])
    }

    /// 2-D convolution, NCHW input and OIHW kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, bias, stride, pad)?;
        let hw = g.hw_out();
        let mut cols = vec![0.0; g.ckk() * hw];
        let mut out = vec![0.0; g.batch * g.cout * hw];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for b in 0..g.batch {
                g.im2col(&xd[b * g.cin * g.h * g.w..], &mut cols);
                gemm(g.cout, g.ckk(), hw, wd, false, &cols, false, &mut out[b * g.cout * hw..], false);
            }
            if let Some(bias) = bias {
                let bd = self.value(bias).data();
                for b in 0..g.batch {
                    for o in 0..g.cout {
                        out[(b * g.cout + o) * hw..][..hw].iter_mut().for_each(|v| *v += bd[o]);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { x, w, bias, stride, pad }, &inputs)
    }

    fn conv_geom(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<ConvGeom> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("need NCHW input and OIHW kernel, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input channels {} != kernel channels {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(TensorError::Attr { op: "conv2d", detail: "stride must be positive".into() });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} does not match {} outputs", self.shape(b), sw[0])));
            }
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})")));
        }
        Ok(ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h,
            w: wd,
            cout: sw[0],
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(kind.name(), format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let ma = broadcast_map(&out_shape, &sa);
        let mb = broadcast_map(&out_shape, &sb);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let x = ad[ma.as_ref().map_or(i, |m| m[i])];
                let y = bd[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        self.push(kind.name(), Tensor::from_parts(out_shape, out), Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push("affine", value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu);
        self.push("gelu", value, Op::Gelu { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::abs);
        self.push("abs", value, Op::Abs { x }, &[x])
    }

    /// `x^p`. For `p < 1` the derivative at exactly zero is taken as 0.
    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.powf(exponent));
        self.push("pow", value, Op::Pow { x, exponent }, &[x])
    }

    // ----- normalisation --------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let row = *value.shape().last().expect("non-empty shape");
        softmax_rows(value.data_mut(), row);
        self.push("softmax", value, Op::Softmax { x }, &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} must be [{d}]", self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = numel(&sx) / d;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        self.push("layer_norm", Tensor::from_parts(sx, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    // ----- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// General axis permutation; `axes[i]` is the input axis placed at output position `i`.
    pub fn transpose(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len() && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::Attr { op: "transpose", detail: format!("{axes:?} is not a permutation of {} axes", sx.len()) });
        }
        let (out_shape, map) = permute_map(&sx, axes);
        let xd = self.value(x).data();
        let out = map.iter().map(|&i| xd[i]).collect();
        self.push("transpose", Tensor::from_parts(out_shape, out), Op::Permute { x, axes: axes.to_vec() }, &[x])
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start >= end || end > sx[axis] {
            return Err(shape_err("slice", format!("range {start}..{end} on axis {axis} of {sx:?}")));
        }
        let (outer, inner) = outer_inner(&sx, axis);
        let len = end - start;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        self.push("slice", Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} incompatible with {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    // ----- reductions -----------------------------------------------------

    fn reduce(&mut self, x: Var, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let sx = self.shape(x).to_vec();
        let xd = self.value(x).data();
        match axis {
            None => Ok((vec![1], vec![xd.iter().sum()], xd.len())),
            Some(a) if a < sx.len() => {
                let (outer, inner) = outer_inner(&sx, a);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..sx[a] {
                        let src = &xd[(o * sx[a] + k) * inner..][..inner];
                        out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                let mut shape: Vec<usize> = sx.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, &d)| d).collect();
                if shape.is_empty() {
                    shape.push(1);
                }
                Ok((shape, out, sx[a]))
            }
            Some(a) => Err(shape_err("reduce", format!("axis {a} out of range for {sx:?}"))),
        }
    }

    /// Sum over all elements (`None`, giving shape `[1]`) or over one axis (removed).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, out, _) = self.reduce(x, axis)?;
        self.push("reduce_sum", Tensor::from_parts(shape, out), Op::Sum { x, axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let (shape, mut out, count) = self.reduce(x, axis)?;
        out.iter_mut().for_each(|v| *v /= count as f64);
        self.push("reduce_mean", Tensor::from_parts(shape, out), Op::Mean { x, axis }, &[x])
    }

    // ----- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention on already-projected tokens.
    ///
    /// `q: [N, D]`, `k: [M, D]`, `v: [M, Dv]`; head `h` uses column block `h`
    /// of each operand and computes `softmax(Q_h K_hᵀ / √(D/heads)) V_h`.
    /// Head outputs are concatenated along columns, giving `[N, Dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        if heads == 0 || sq[1] % heads != 0 || sv[1] % heads != 0 {
            return Err(TensorError::Attr {
                op: "attention",
                detail: format!("{heads} heads do not divide widths {} and {}", sq[1], sv[1]),
            });
        }
        let probs = attention_probs(self.value(q).data(), self.value(k).data(), sq[0], sk[0], sq[1], heads);
        let (n, m, dv) = (sq[0], sk[0], sv[1]);
        let dvh = dv / heads;
        let mut out = vec![0.0; n * dv];
        let vd = self.value(v).data();
        for h in 0..heads {
            strided_gemm(n, m, dvh, &probs[h * n * m..], m as isize, 1, &vd[h * dvh..], dv as isize, 1, &mut out[h * dvh..], dv as isize, 1, false);
        }
        self.push("attention", Tensor::from_parts(vec![n, dv], out), Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::NoGraph);
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            match node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Param(id) => out.params.push((id, g)),
                _ => {}
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// Backward, then add parameter gradients into `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

/// Per-head softmax(QKᵀ·scale) probabilities, laid out `[heads, N, M]`.
fn attention_probs(q: &[f64], k: &[f64], n: usize, m: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * n * m];
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        strided_gemm(n, dh, m, &q[h * dh..], d as isize, 1, &k[h * dh..], 1, d as isize, p, m as isize, 1, false);
        p.iter_mut().for_each(|v| *v *= scale);
        softmax_rows(p, m);
    }
    probs
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: &[f64]) {
    if let Some(s) = slot(grads, nodes, v) {
        s.iter_mut().zip(contrib).for_each(|(a, b)| *a += b);
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    let y = node.value.data();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (shp(*a), shp(*b));
            let (batch, m, k) = if sa.len() == 2 { (1, sa[0], sa[1]) } else { (sa[0], sa[1], sa[2]) };
            let n = *sb.last().unwrap();
            let shared = sb.len() == 2;
            if let Some(ga) = slot(grads, nodes, *a) {
                let bd = val(*b);
                for bi in 0..batch {
                    let bs = if shared { bd } else { &bd[bi * k * n..] };
                    gemm(m, n, k, &g[bi * m * n..], false, bs, true, &mut ga[bi * m * k..], true);
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                let ad = val(*a);
                for bi in 0..batch {
                    let off = if shared { 0 } else { bi * k * n };
                    gemm(k, m, n, &ad[bi * m * k..], true, &g[bi * m * n..], false, &mut gb[off..], true);
                }
            }
        }
        Op::Conv2d { x, w, bias, stride, pad } => {
            let (sx, sw) = (shp(*x), shp(*w));
            let geom = ConvGeom {
                batch: sx[0],
                cin: sx[1],
                h: sx[2],
                w: sx[3],
                cout: sw[0],
                kh: sw[2],
                kw: sw[3],
                ho: node.value.shape()[2],
                wo: node.value.shape()[3],
                stride: *stride,
                pad: *pad,
            };
            let hw = geom.hw_out();
            let ckk = geom.ckk();
            let mut cols = vec![0.0; ckk * hw];
            let need_w = nodes[w.0].requires_grad;
            let need_x = nodes[x.0].requires_grad;
            for b in 0..geom.batch {
                let gb = &g[b * geom.cout * hw..(b + 1) * geom.cout * hw];
                if need_w {
                    geom.im2col(&val(*x)[b * geom.cin * geom.h * geom.w..], &mut cols);
                    let gw = slot(grads, nodes, *w).unwrap();
                    gemm(geom.cout, hw, ckk, gb, false, &cols, true, gw, true);
                }
                if need_x {
                    gemm(ckk, geom.cout, hw, val(*w), true, gb, false, &mut cols, false);
                    let gx = slot(grads, nodes, *x).unwrap();
                    geom.col2im_add(&cols, &mut gx[b * geom.cin * geom.h * geom.w..]);
                }
            }
            if let Some(bias) = bias {
                if let Some(gbias) = slot(grads, nodes, *bias) {
                    for b in 0..geom.batch {
                        for (o, gbo) in gbias.iter_mut().enumerate() {
                            *gbo += g[(b * geom.cout + o) * hw..][..hw].iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        Op::Binary { kind, a, b } => {
            let out_shape = node.value.shape();
            let ma = broadcast_map(out_shape, shp(*a));
            let mb = broadcast_map(out_shape, shp(*b));
            let (ad, bd) = (val(*a), val(*b));
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            if let Some(ga) = slot(grads, nodes, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, yv) = (ad[ia(i)], bd[ib(i)]);
                    ga[ia(i)] += gi
                        * match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => yv,
                            Binary::Div => 1.0 / yv,
                            Binary::Max => f64::from(u8::from(x >= yv)),
                        };
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    let (x, yv) = (ad[ia(i)], bd[ib(i)]);
                    gb[ib(i)] += gi
                        * match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => x,
                            Binary::Div => -x / (yv * yv),
                            Binary::Max => f64::from(u8::from(x < yv)),
                        };
                }
            }
        }
        Op::Affine { x, scale } => {
            let c: Vec<f64> = g.iter().map(|v| v * scale).collect();
            add_into(grads, nodes, *x, &c);
        }
        Op::Sigmoid { x } => {
            let c: Vec<f64> = g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect();
            add_into(grads, nodes, *x, &c);
        }
        Op::Relu { x } => {
            let c: Vec<f64> = g.iter().zip(val(*x)).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
            add_into(grads, nodes, *x, &c);
        }
        Op::Gelu { x } => {
            let c: Vec<f64> = g.iter().zip(val(*x)).map(|(gi, &xi)| gi * gelu_grad(xi)).collect();
            add_into(grads, nodes, *x, &c);
        }
        Op::Abs { x } => {
            let c: Vec<f64> = g
                .iter()
                .zip(val(*x))
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else if xi < 0.0 { -gi } else { 0.0 })
                .collect();
            add_into(grads, nodes, *x, &c);
        }
        Op::Pow { x, exponent } => {
            let p = *exponent;
            let c: Vec<f64> = g
                .iter()
                .zip(val(*x))
                .map(|(gi, &xi)| if xi == 0.0 && p < 1.0 { 0.0 } else { gi * p * xi.powf(p - 1.0) })
                .collect();
            add_into(grads, nodes, *x, &c);
        }
        Op::Softmax { x } => {
            let row = *node.value.shape().last().unwrap();
            let mut c = vec![0.0; y.len()];
            for ((cr, yr), gr) in c.chunks_mut(row).zip(y.chunks(row)).zip(g.chunks(row)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..row {
                    cr[j] = yr[j] * (gr[j] - dot);
                }
            }
            add_into(grads, nodes, *x, &c);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = rstd.len().max(1);
            let d = xhat.len() / d;
            let gd = val(*gamma);
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for gr in g.chunks(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
        }
        Op::Reshape { x } => add_into(grads, nodes, *x, g),
        Op::Permute { x, axes } => {
            let (_, map) = permute_map(shp(*x), axes);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (i, &src) in map.iter().enumerate() {
                    gx[src] += g[i];
                }
            }
        }
        Op::Slice { x, axis, start } => {
            let sx = shp(*x);
            let (outer, inner) = outer_inner(sx, *axis);
            let len = node.value.shape()[*axis];
            let full = sx[*axis];
            if let Some(gx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                    dst.iter_mut().zip(&g[o * len * inner..]).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, inner) = outer_inner(node.value.shape(), *axis);
            let total = node.value.shape()[*axis] * inner;
            let mut offset = 0;
            for &v in xs {
                let len = shp(v)[*axis] * inner;
                if let Some(gv) = slot(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..][..len];
                        gv[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let sx = shp(*x).to_vec();
            let is_mean = matches!(node.op, Op::Mean { .. });
            if let Some(gx) = slot(grads, nodes, *x) {
                match axis {
                    None => {
                        let s = if is_mean { g[0] / gx.len() as f64 } else { g[0] };
                        gx.iter_mut().for_each(|v| *v += s);
                    }
                    Some(a) => {
                        let (outer, inner) = outer_inner(&sx, *a);
                        let f = if is_mean { 1.0 / sx[*a] as f64 } else { 1.0 };
                        for o in 0..outer {
                            for k in 0..sx[*a] {
                                let dst = &mut gx[(o * sx[*a] + k) * inner..][..inner];
                                dst.iter_mut().zip(&g[o * inner..]).for_each(|(d, s)| *d += s * f);
                            }
                        }
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (sq, sk, sv) = (shp(*q), shp(*k), shp(*v));
            let (n, m, d, dv, heads) = (sq[0], sk[0], sq[1], sv[1], *heads);
            let (dh, dvh) = (d / heads, dv / heads);
            let scale = 1.0 / (dh as f64).sqrt();
            let (qd, kd, vd) = (val(*q), val(*k), val(*v));
            let mut dp = vec![0.0; n * m];
            let need_qk = nodes[q.0].requires_grad || nodes[k.0].requires_grad;
            for h in 0..heads {
                let p = &probs[h * n * m..(h + 1) * n * m];
                if let Some(gv) = slot(grads, nodes, *v) {
                    strided_gemm(m, n, dvh, p, 1, m as isize, &g[h * dvh..], dv as isize, 1, &mut gv[h * dvh..], dv as isize, 1, true);
                }
                if !need_qk {
                    continue;
                }
                strided_gemm(n, dvh, m, &g[h * dvh..], dv as isize, 1, &vd[h * dvh..], 1, dv as isize, &mut dp, m as isize, 1, false);
                for (dr, pr) in dp.chunks_mut(m).zip(p.chunks(m)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                if let Some(gq) = slot(grads, nodes, *q) {
                    strided_gemm(n, m, dh, &dp, m as isize, 1, &kd[h * dh..], d as isize, 1, &mut gq[h * dh..], d as isize, 1, true);
                }
                if let Some(gk) = slot(grads, nodes, *k) {
                    strided_gemm(m, n, dh, &dp, 1, m as isize, &qd[h * dh..], d as isize, 1, &mut gk[h * dh..], d as isize, 1, true);
                }
            }
        }
    }
}

/// Attention weights `[heads, N, M]` for already-projected `q: [N, D]`, `k: [M, D]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Vec<f64> {
    attention_probs(q.data(), k.data(), q.shape()[0], k.shape()[0], q.shape()[1], heads)
}

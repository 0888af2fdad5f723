//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass for one sample.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for the [`ParamStore`] entries that were read. Nodes
//! that depend on no parameter skip gradient work entirely.
//!
//! Spatial tensors are `[channels, height, width]`; token tensors are
//! `[tokens, dim]`.

mod gemm;
mod params;
mod tensor;

pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::interp::{self, Tap};
use gemm::gemm;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Resize {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    ChannelMean(Var),
    ChannelScale(Var, Var),
    AddScalar(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddRowBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectChannel(Var, usize),
    Transpose(Var),
    External {
        x: Var,
        grad: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward pass. Borrows the parameters it reads.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id).clone();
        self.push(t, Op::Param(id), true)
    }

    /// 2-D convolution of a CHW tensor with an `[out, in, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = &self.value(w).shape;
        assert_eq!(ws.len(), 4, "conv kernel must be [out, in, k, k]");
        let (o, ci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ci, c, "conv input channels: kernel {ci}, input {c}");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(&self.value(x).data, c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![0.0; o * ho * wo];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            assert_eq!(bias.len(), o);
            for (row, &bv) in out.chunks_mut(ho * wo).zip(bias) {
                row.fill(bv);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(o, c * k * k, ho * wo, &self.value(w).data, false, &cols, false, &mut out, beta);
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add: shape mismatch");
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "mul: shape mismatch");
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let shape = self.value(a).shape.clone();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), needs)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu(v).0)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        let needs = self.ng(x);
        self.push(out, op, needs)
    }

    /// Bilinear resize of every channel of a CHW tensor.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        let rows = interp::taps(h, oh);
        let cols = interp::taps(w, ow);
        let mut out = vec![0.0; c * oh * ow];
        let src = &self.value(x).data;
        for ch in 0..c {
            interp::resize_plane_into(
                &src[ch * h * w..(ch + 1) * h * w],
                w,
                &rows,
                &cols,
                &mut out[ch * oh * ow..(ch + 1) * oh * ow],
            );
        }
        let needs = self.ng(x);
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Resize { x, rows, cols }, needs)
    }

    /// Spatial mean per channel: `[C, H, W] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let data = (0..c)
            .map(|ch| t.channel(ch).iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::new(vec![c], data), Op::ChannelMean(x), needs)
    }

    /// Multiplies channel `c` of `x` by `g[c]`.
    pub fn channel_scale(&mut self, x: Var, g: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let gv = &self.value(g).data;
        assert_eq!(gv.len(), c, "channel_scale: gate length");
        let mut data = t.data.clone();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v *= gv[ch]);
        }
        let shape = t.shape.clone();
        let needs = self.ng(x) || self.ng(g);
        self.push(Tensor::new(shape, data), Op::ChannelScale(x, g), needs)
    }

    /// Adds a one-element tensor `s` to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "add_scalar expects a scalar");
        let sv = self.value(s).data[0];
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v + sv).collect());
        let needs = self.ng(x) || self.ng(s);
        self.push(out, Op::AddScalar(x, s), needs)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a stored matrix.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.value(a).rc();
        let (br, bc) = self.value(b).rc();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, ta, &self.value(b).data, tb, &mut out, 0.0);
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, ta, tb }, needs)
    }

    /// Adds `b` (`[D]`) to every row of `x` (`[N, D]`).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (_, d) = self.value(x).rc();
        let bv = &self.value(b).data;
        assert_eq!(bv.len(), d, "row bias length");
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let shape = self.value(x).shape.clone();
        let needs = self.ng(x) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::AddRowBias(x, b), needs)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.value(x).rc();
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(vec![n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).rc();
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let needs = self.ng(x);
        self.push(Tensor::new(vec![n, d], data), Op::SoftmaxRows(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(t.numel(), shape.iter().product::<usize>(), "reshape size");
        let out = Tensor::new(shape.to_vec(), t.data.clone());
        let needs = self.ng(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(x).rc();
        assert!(start + len <= n, "slice_rows out of range");
        let data = self.value(x).data[start * d..(start + len) * d].to_vec();
        let needs = self.ng(x);
        self.push(Tensor::new(vec![len, d], data), Op::SliceRows { x, start }, needs)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(x).rc();
        assert!(start + len <= d, "slice_cols out of range");
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let needs = self.ng(x);
        self.push(Tensor::new(vec![n, len], data), Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rc().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).rc().1).collect();
        assert!(parts.iter().all(|&p| self.value(p).rc().0 == n), "concat_cols rows");
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![n, total], data), Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Channel `c` of a CHW tensor as a `[1, H, W]` tensor.
    pub fn select_channel(&mut self, x: Var, c: usize) -> Var {
        let (_, h, w) = self.value(x).chw();
        let data = self.value(x).channel(c).to_vec();
        let needs = self.ng(x);
        self.push(Tensor::new(vec![1, h, w], data), Op::SelectChannel(x, c), needs)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).rc();
        let src = &self.value(x).data;
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[c * n + r] = src[r * d + c];
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(vec![d, n], data), Op::Transpose(x), needs)
    }

    /// Scalar node for an externally evaluated function of `x` whose
    /// gradient with respect to `x` is already known.
    pub fn external(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.value(x).numel(), "external gradient size");
        let needs = self.ng(x);
        self.push(Tensor::scalar(value), Op::External { x, grad }, needs)
    }

    /// `sum w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms
            .iter()
            .map(|&(v, w)| {
                assert_eq!(self.value(v).numel(), 1, "weighted_sum expects scalars");
                w * self.value(v).data[0]
            })
            .sum();
        let needs = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(value), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::empty(self.params.len());
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &gy, &mut grads, &mut out);
        }
        out
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(
        &self,
        node: &Node,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let y = &node.value.data;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let dst = out.grads[id.0].get_or_insert_with(|| vec![0.0; gy.len()]);
                dst.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (c, h, wd) = self.value(*x).chw();
                let ws = &self.value(*w).shape;
                let (o, k) = (ws[0], ws[2]);
                let (_, ho, wo) = node.value.chw();
                let ckk = c * k * k;
                if let Some(b) = b {
                    if let Some(db) = self.acc(grads, *b) {
                        for (d, row) in db.iter_mut().zip(gy.chunks(ho * wo)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    gemm(o, ho * wo, ckk, gy, false, cols, true, dw, 1.0);
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; ckk * ho * wo];
                    gemm(ckk, o, ho * wo, &self.value(*w).data, true, gy, false, &mut dcols, 0.0);
                    let dx = self.acc(grads, *x).expect("needs grad");
                    col2im(&dcols, dx, c, h, wd, k, *stride, *pad, ho, wo);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, g), o) in d.iter_mut().zip(gy).zip(bv) {
                        *d += g * o;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, g), o) in d.iter_mut().zip(gy).zip(av) {
                        *d += g * o;
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d += s * g);
                }
            }
            Op::Relu(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, g), yv) in d.iter_mut().zip(gy).zip(y) {
                        if *yv > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.value(*x).data;
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, g), xv) in d.iter_mut().zip(gy).zip(xv) {
                        *d += if *xv > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, g), yv) in d.iter_mut().zip(gy).zip(y) {
                        *d += g * yv * (1.0 - yv);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = &self.value(*x).data;
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, g), xv) in d.iter_mut().zip(gy).zip(xv) {
                        *d += g * gelu(*xv).1;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &self.value(*x).data;
                if let Some(d) = self.acc(grads, *x) {
                    for ((d, g), xv) in d.iter_mut().zip(gy).zip(xv) {
                        if *xv >= *lo && *xv <= *hi {
                            *d += g;
                        }
                    }
                }
            }
            Op::Resize { x, rows, cols } => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                if let Some(d) = self.acc(grads, *x) {
                    for ch in 0..c {
                        interp::resize_plane_adjoint(
                            &gy[ch * oh * ow..(ch + 1) * oh * ow],
                            w,
                            rows,
                            cols,
                            &mut d[ch * h * w..(ch + 1) * h * w],
                        );
                    }
                }
            }
            Op::ChannelMean(x) => {
                let (_, h, w) = self.value(*x).chw();
                if let Some(d) = self.acc(grads, *x) {
                    let inv = 1.0 / (h * w) as f64;
                    for (plane, g) in d.chunks_mut(h * w).zip(gy) {
                        plane.iter_mut().for_each(|v| *v += g * inv);
                    }
                }
            }
            Op::ChannelScale(x, g) => {
                let (_, h, w) = self.value(*x).chw();
                let xv = &self.value(*x).data;
                let gv = &self.value(*g).data;
                if let Some(d) = self.acc(grads, *x) {
                    for (ch, (dp, gp)) in d.chunks_mut(h * w).zip(gy.chunks(h * w)).enumerate() {
                        dp.iter_mut().zip(gp).for_each(|(d, g)| *d += g * gv[ch]);
                    }
                }
                if let Some(d) = self.acc(grads, *g) {
                    for (ch, (xp, gp)) in xv.chunks(h * w).zip(gy.chunks(h * w)).enumerate() {
                        d[ch] += xp.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::AddScalar(x, s) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *s) {
                    d[0] += gy.iter().sum::<f64>();
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = node.value.rc();
                let (ar, ac) = self.value(*a).rc();
                let k = if *ta { ar } else { ac };
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if let Some(da) = self.acc(grads, *a) {
                    if *ta {
                        // stored [k, m] = op(b) * gy^T
                        gemm(k, n, m, bv, *tb, gy, true, da, 1.0);
                    } else {
                        gemm(m, n, k, gy, false, bv, !*tb, da, 1.0);
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    if *tb {
                        // stored [n, k] = gy^T * op(a)
                        gemm(n, m, k, gy, true, av, *ta, db, 1.0);
                    } else {
                        gemm(k, m, n, av, !*ta, gy, false, db, 1.0);
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                let (_, d) = node.value.rc();
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    for row in gy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = node.value.rc();
                let gv = &self.value(*gamma).data;
                if let Some(dg) = self.acc(grads, *gamma) {
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(dbeta) = self.acc(grads, *beta) {
                    for row in gy.chunks(d) {
                        dbeta.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..d {
                            dxhat[j] = gy[r * d + j] * gv[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * xhat[r * d + j];
                        }
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            dx[r * d + j] +=
                                scale * (d as f64 * dxhat[j] - sum - xhat[r * d + j] * dot);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (_, d) = node.value.rc();
                if let Some(dx) = self.acc(grads, *x) {
                    for ((dxr, gr), yr) in dx.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((dv, g), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (g - dot);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(gy).for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceRows { x, start } => {
                let (_, d) = self.value(*x).rc();
                if let Some(dx) = self.acc(grads, *x) {
                    dx[start * d..start * d + gy.len()]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceCols { x, start } => {
                let (_, d) = self.value(*x).rc();
                let (n, len) = node.value.rc();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..n {
                        for j in 0..len {
                            dx[r * d + start + j] += gy[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.rc();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).rc().1;
                    if let Some(dp) = self.acc(grads, p) {
                        for r in 0..n {
                            for j in 0..w {
                                dp[r * w + j] += gy[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectChannel(x, c) => {
                let (_, h, w) = self.value(*x).chw();
                if let Some(dx) = self.acc(grads, *x) {
                    dx[c * h * w..(c + 1) * h * w]
                        .iter_mut()
                        .zip(gy)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Transpose(x) => {
                let (n, d) = self.value(*x).rc();
                if let Some(dx) = self.acc(grads, *x) {
                    for r in 0..n {
                        for c in 0..d {
                            dx[r * d + c] += gy[c * n + r];
                        }
                    }
                }
            }
            Op::External { x, grad } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.iter_mut().zip(grad).for_each(|(d, g)| *d += gy[0] * g);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(d) = self.acc(grads, v) {
                        d[0] += gy[0] * w;
                    }
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            *d = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;

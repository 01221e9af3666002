//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse. Nodes built only from constants never receive
//! gradients and are skipped during the reverse sweep.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice(Var, usize),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    UpsampleNearest(Var, usize),
    ResizeBilinear(Var),
    ChannelMean(Var),
    ChannelStd(Var),
    RowCosine(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
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
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Source coordinate and blend weight for bilinear resampling with
/// half-pixel centers.
fn bilinear_taps(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a [C,H,W] tensor, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got {shape:?}");
    (shape[0], shape[1])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise shape mismatch {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clamp(a, 0.0, f64::INFINITY)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `x[n,m] + b[m]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = rows_cols(self.shape(x));
        assert_eq!(self.value(b).len(), m, "row bias length mismatch");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        debug_assert_eq!(out.len(), n * m);
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRowBias(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[c, r], out), Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Flat slice `[start, start+len)` as a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let data = self.value(a).data()[start..start + len].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[len], data), Op::Slice(a, start), rg)
    }

    /// Rows `[r0, r1)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (_, c) = rows_cols(self.shape(a));
        let s = self.slice(a, r0 * c, (r1 - r0) * c);
        self.reshape(s, &[r1 - r0, c])
    }

    /// Columns `[c0, c1)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        let w = c1 - c0;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + c0..i * c + c1]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[r, w], out), Op::SliceCols(a, c0), rg)
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing dims differ");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), rg)
    }

    /// Concatenate matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| rows_cols(self.shape(p)).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.shape()[0], r, "concat_cols row mismatch");
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(&[r, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(self.shape(a));
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (_, c) = rows_cols(self.shape(x));
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::new();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mu) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Group normalization of a `[C,H,W]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (c, h, w) = chw(self.shape(x));
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let per = (c / groups) * h * w;
        let hw = h * w;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(groups);
        for gi in 0..groups {
            let seg = &src[gi * per..(gi + 1) * per];
            let mu = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / per as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (i, v) in seg.iter().enumerate() {
                let idx = gi * per + i;
                let ch = idx / hw;
                let xh = (v - mu) * r;
                xhat[idx] = xh;
                out[idx] = xh * g[ch] + b[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(&[c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// 2-D convolution of a `[C,H,W]` map with weights `[O,C,k,k]` and
    /// optional bias `[O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = chw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [O,C,k,k]");
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        assert_eq!(ws[2], ws[3]);
        let (o, k) = (ws[0], ws[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let p = oh * ow;
        let ckk = c * k * k;
        let src = self.value(x).data();
        let cols = if k == 1 && stride == 1 && pad == 0 {
            src.to_vec()
        } else {
            im2col(src, &geom)
        };
        let mut out = vec![0.0; o * p];
        gemm(o, ckk, p, self.value(w).data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            for (oc, row) in out.chunks_mut(p).enumerate() {
                for v in row.iter_mut() {
                    *v += bias[oc];
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(
            Tensor::new(&[o, oh, ow], out),
            Op::Conv2d { x, w, b, geom, cols },
            rg,
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = src[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c, oh, ow], out), Op::UpsampleNearest(x, factor), rg)
    }

    /// Bilinear resampling of a `[C,H,W]` map to `[C,oh,ow]` (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let ytaps: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h, oh)).collect();
        let xtaps: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w, ow)).collect();
        for ch in 0..c {
            let base = ch * h * w;
            for (y, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let v00 = src[base + y0 * w + x0];
                    let v01 = src[base + y0 * w + x1];
                    let v10 = src[base + y1 * w + x0];
                    let v11 = src[base + y1 * w + x1];
                    out[(ch * oh + y) * ow + xx] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                        + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c, oh, ow], out), Op::ResizeBilinear(x), rg)
    }

    /// Per-channel spatial mean of a `[C,H,W]` map, shape `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let hw = (h * w) as f64;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c], out), Op::ChannelMean(x), rg)
    }

    /// Per-channel population standard deviation, shape `[C]`. A channel
    /// whose values are all equal yields exactly 0.
    pub fn channel_std(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| {
                let first = ch[0];
                if ch.iter().all(|&v| v == first) {
                    return 0.0;
                }
                let mu = ch.iter().sum::<f64>() / ch.len() as f64;
                (ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / ch.len() as f64).sqrt()
            })
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c], out), Op::ChannelStd(x), rg)
    }

    /// Cosine similarity of each row of `a` with the matching row of the
    /// constant `target`, shape `[rows]`. Rows where either norm is below
    /// `1e-8` yield 0 with zero gradient.
    pub fn row_cosine(&mut self, a: Var, target: &Tensor) -> Var {
        let (r, c) = rows_cols(self.shape(a));
        assert_eq!(target.shape(), self.shape(a), "cosine target shape mismatch");
        let src = self.value(a).data();
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let x = &src[i * c..(i + 1) * c];
                let t = &target.data()[i * c..(i + 1) * c];
                let (nx, nt) = (norm(x), norm(t));
                if nx < COS_EPS || nt < COS_EPS {
                    0.0
                } else {
                    dot(x, t) / (nx * nt)
                }
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(&[r], out), Op::RowCosine(a, target.clone()), rg)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(g.reshape(shape));
            }
        }
    }

    fn acc_map(&self, grads: &mut [Option<Tensor>], v: Var, gout: &Tensor, f: impl Fn(usize, f64) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let data = gout.data().iter().enumerate().map(|(i, &g)| f(i, g)).collect();
        self.acc(grads, v, Tensor::new(gout.shape(), data));
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc_map(grads, *b, gout, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, gout, |i, g| g * vb[i]);
                self.acc_map(grads, *b, gout, |i, g| g * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, gout, |i, g| g / vb[i]);
                self.acc_map(grads, *b, gout, |i, g| -g * va[i] / (vb[i] * vb[i]));
            }
            Op::Scale(a, c) => self.acc_map(grads, *a, gout, |_, g| g * c),
            Op::Shift(a) => self.acc(grads, *a, gout.clone()),
            Op::Exp(a) => self.acc_map(grads, *a, gout, |i, g| g * out[i]),
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.acc_map(grads, *a, gout, |i, g| g / va[i]);
            }
            Op::Sigmoid(a) => self.acc_map(grads, *a, gout, |i, g| g * out[i] * (1.0 - out[i])),
            Op::Tanh(a) => self.acc_map(grads, *a, gout, |i, g| g * (1.0 - out[i] * out[i])),
            Op::Silu(a) => {
                let va = self.value(*a).data();
                self.acc_map(grads, *a, gout, |i, g| {
                    let s = sigmoid(va[i]);
                    g * (s + va[i] * s * (1.0 - s))
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc_map(grads, *a, gout, |i, g| g * gelu_grad(va[i]));
            }
            Op::Sqrt(a) => self.acc_map(grads, *a, gout, |i, g| g * 0.5 / out[i]),
            Op::Powf(a, p) => {
                let va = self.value(*a).data();
                let p = *p;
                self.acc_map(grads, *a, gout, |i, g| {
                    if p == 0.0 {
                        0.0
                    } else {
                        g * p * va[i].powf(p - 1.0)
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.acc_map(grads, *a, gout, |i, g| {
                    if va[i] >= *lo && va[i] <= *hi {
                        g
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                let g = gout.item();
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::full(&shape, g));
            }
            Op::AddRowBias(x, b) => {
                self.acc(grads, *x, gout.clone());
                if self.requires_grad(*b) {
                    let m = self.value(*b).len();
                    let mut gb = vec![0.0; m];
                    for row in gout.data().chunks(m) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[m], gb));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gout.data(), false, self.value(*b).data(), true, &mut ga, false);
                    self.acc(grads, *a, Tensor::new(&[m, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gout.data(), false, &mut gb, false);
                    self.acc(grads, *b, Tensor::new(&[k, n], gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(*a));
                let g = gout.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(grads, *a, Tensor::new(&[r, c], ga));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, gout.clone().reshape(&shape));
            }
            Op::Slice(a, start) => {
                if self.requires_grad(*a) {
                    let shape = self.shape(*a).to_vec();
                    let mut ga = Tensor::zeros(&shape);
                    ga.data_mut()[*start..*start + gout.len()].copy_from_slice(gout.data());
                    self.acc(grads, *a, ga);
                }
            }
            Op::SliceCols(a, c0) => {
                if self.requires_grad(*a) {
                    let (r, c) = rows_cols(self.shape(*a));
                    let w = gout.shape()[1];
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + c0..i * c + c0 + w].copy_from_slice(&gout.data()[i * w..(i + 1) * w]);
                    }
                    self.acc(grads, *a, Tensor::new(&[r, c], ga));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        let shape = self.shape(p).to_vec();
                        self.acc(grads, p, Tensor::new(&shape, gout.data()[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gout.shape()[1];
                let r = gout.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&gout.data()[i * total + off..i * total + off + w]);
                        }
                        self.acc(grads, p, Tensor::new(&[r, w], gp));
                    }
                    off += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let c = gout.shape()[1];
                let mut ga = vec![0.0; gout.len()];
                for ((gy, y), gx) in gout.data().chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let d: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[j] = y[j] * (gy[j] - d);
                    }
                }
                self.acc(grads, *a, Tensor::new(gout.shape(), ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = gout.shape()[1];
                let g = self.value(*gamma).data();
                let mut gx = vec![0.0; gout.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (r, (gy, xh)) in gout.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gy[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        gg[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        gx[r * c + j] = rstd[r] * (gy[j] * g[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                self.acc(grads, *x, Tensor::new(gout.shape(), gx));
                self.acc(grads, *gamma, Tensor::new(&[c], gg));
                self.acc(grads, *beta, Tensor::new(&[c], gb));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (c, h, w) = chw(gout.shape());
                let hw = h * w;
                let per = (c / groups) * hw;
                let g = self.value(*gamma).data();
                let gy = gout.data();
                let mut gx = vec![0.0; gy.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for gi in 0..*groups {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for i in gi * per..(gi + 1) * per {
                        let ch = i / hw;
                        let d = gy[i] * g[ch];
                        mean_d += d;
                        mean_dx += d * xhat[i];
                        gg[ch] += gy[i] * xhat[i];
                        gb[ch] += gy[i];
                    }
                    mean_d /= per as f64;
                    mean_dx /= per as f64;
                    for i in gi * per..(gi + 1) * per {
                        let ch = i / hw;
                        gx[i] = rstd[gi] * (gy[i] * g[ch] - mean_d - xhat[i] * mean_dx);
                    }
                }
                self.acc(grads, *x, Tensor::new(gout.shape(), gx));
                self.acc(grads, *gamma, Tensor::new(&[c], gg));
                self.acc(grads, *beta, Tensor::new(&[c], gb));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.oh * geom.ow;
                let ckk = geom.c * geom.k * geom.k;
                let gy = gout.data();
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; geom.o * ckk];
                    gemm(geom.o, p, ckk, gy, false, cols, true, &mut gw, false);
                    let shape = self.shape(*w).to_vec();
                    self.acc(grads, *w, Tensor::new(&shape, gw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let gb: Vec<f64> = gy.chunks(p).map(|r| r.iter().sum()).collect();
                        self.acc(grads, *b, Tensor::new(&[geom.o], gb));
                    }
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; ckk * p];
                    gemm(ckk, geom.o, p, self.value(*w).data(), true, gy, false, &mut gcols, false);
                    let gx = if geom.k == 1 && geom.stride == 1 && geom.pad == 0 {
                        gcols
                    } else {
                        col2im(&gcols, geom)
                    };
                    self.acc(grads, *x, Tensor::new(&[geom.c, geom.h, geom.w], gx));
                }
            }
            Op::UpsampleNearest(x, f) => {
                let (c, h, w) = chw(self.shape(*x));
                let (oh, ow) = (h * f, w * f);
                let gy = gout.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(ch * h + y / f) * w + xx / f] += gy[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::ResizeBilinear(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let (_, oh, ow) = chw(gout.shape());
                let gy = gout.data();
                let mut gx = vec![0.0; c * h * w];
                let ytaps: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h, oh)).collect();
                let xtaps: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w, ow)).collect();
                for ch in 0..c {
                    let base = ch * h * w;
                    for (y, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                            let g = gy[(ch * oh + y) * ow + xx];
                            gx[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                            gx[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                            gx[base + y1 * w + x0] += g * fy * (1.0 - fx);
                            gx[base + y1 * w + x1] += g * fy * fx;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let hw = h * w;
                let gy = gout.data();
                let gx = Tensor::from_fn(&[c, h, w], |i| gy[i / hw] / hw as f64);
                self.acc(grads, *x, gx);
            }
            Op::ChannelStd(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let hw = h * w;
                let src = self.value(*x).data();
                let gy = gout.data();
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    let sigma = out[ch];
                    if sigma == 0.0 {
                        continue;
                    }
                    let seg = &src[ch * hw..(ch + 1) * hw];
                    let mu = seg.iter().sum::<f64>() / hw as f64;
                    for (i, v) in seg.iter().enumerate() {
                        gx[ch * hw + i] = gy[ch] * (v - mu) / (hw as f64 * sigma);
                    }
                }
                self.acc(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::RowCosine(a, target) => {
                let (r, c) = rows_cols(self.shape(*a));
                let src = self.value(*a).data();
                let gy = gout.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let x = &src[i * c..(i + 1) * c];
                    let t = &target.data()[i * c..(i + 1) * c];
                    let (nx, nt) = (norm(x), norm(t));
                    if nx < COS_EPS || nt < COS_EPS {
                        continue;
                    }
                    let cos = out[i];
                    for j in 0..c {
                        ga[i * c + j] = gy[i] * (t[j] / (nx * nt) - cos * x[j] / (nx * nx));
                    }
                }
                self.acc(grads, *a, Tensor::new(&[r, c], ga));
            }
        }
    }
}

const COS_EPS: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn im2col(src: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.k * g.k * p];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[(ch * g.h + iy as usize) * g.w..(ch * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let srcr = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[(ch * g.h + iy as usize) * g.w + ix as usize] += srcr[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

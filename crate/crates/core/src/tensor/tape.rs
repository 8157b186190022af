//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the inputs it needs
//! for the backward rule. Node indices are therefore already in topological
//! order and `backward` simply walks them in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{broadcast_index_map, broadcast_shapes, numel, strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Pow(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary { kind: UnaryKind, x: Var },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Affine { x: Var, scale: T },
    MatMul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Sum { x: Var, keep_shape: Vec<usize> },
    Max { x: Var, argmax: Vec<usize> },
    Softmax { x: Var, axis: usize, log: bool },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Pad2d { x: Var },
    Upsample2x { x: Var },
    Mask { x: Var, mask: Vec<T> },
    BceLogits { x: Var, target: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Operation record plus the values of every intermediate.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
    params: HashMap<(u32, usize), Var>,
    param_order: Vec<(u32, usize, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), strict: false, params: HashMap::new(), param_order: Vec::new() }
    }

    /// Strict mode turns `log` of nonpositive values and division by zero into
    /// errors instead of producing inf/NaN.
    pub fn strict() -> Self {
        Self { strict: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::c(v)))
    }

    /// Trainable leaf keyed by `(store_tag, index)`; repeated requests return
    /// the same node.
    pub fn param_leaf(&mut self, tag: u32, index: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&(tag, index)) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert((tag, index), v);
        self.param_order.push((tag, index, v));
        v
    }

    /// Parameters of store `tag` that received gradient, in first-use order.
    pub fn param_grads(&self, tag: u32) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.param_order
            .iter()
            .filter(move |(t, _, _)| *t == tag)
            .filter_map(|&(_, idx, v)| self.nodes[v.0].grad.as_deref().map(|g| (idx, g)))
    }

    /// Copies the value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if self.strict && kind == UnaryKind::Log {
            if let Some(bad) = xv.data().iter().find(|v| **v <= T::zero()) {
                return Err(Error::Domain { op: "log", detail: format!("nonpositive operand {bad}") });
            }
        }
        let f: Box<dyn Fn(T) -> T> = match kind {
            UnaryKind::Neg => Box::new(|v: T| -v),
            UnaryKind::Exp => Box::new(|v: T| v.exp()),
            UnaryKind::Log => Box::new(|v: T| v.ln()),
            UnaryKind::Relu => Box::new(|v: T| v.max(T::zero())),
            UnaryKind::LeakyRelu(s) => Box::new(move |v: T| if v > T::zero() { v } else { v * T::c(s) }),
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Tanh => Box::new(|v: T| v.tanh()),
            UnaryKind::Pow(p) => Box::new(move |v: T| v.powf(T::c(p))),
        };
        let out = xv.map(f);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary { kind, x }, rg))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if self.strict && kind == BinaryKind::Div && bv.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain { op: "div", detail: "zero divisor".into() });
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shapes(av.shape(), bv.shape()).map_err(|_| Error::ShapeMismatch {
                op: binary_name(kind),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })?;
            let ma = broadcast_index_map(av.shape(), &shape);
            let mb = broadcast_index_map(bv.shape(), &shape);
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(p), x)
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::c(scale), T::c(shift));
        let out = self.nodes[x.0].value.map(|v| s * v + c);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Affine { x, scale: s }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[m,k] · b[k,n]`, or `a · bᵀ` with `b[n,k]` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(mismatch());
        }
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let data = if trans_b { kernels::mm_nt(ad, bd, m, k, n) } else { kernels::mm(ad, bd, m, k, n) };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Batched product over the leading axis: `a[B,m,k] · b[B,k,n]` (or `b[B,n,k]ᵀ`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(mismatch());
        }
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            let a_i = &ad[i * m * k..(i + 1) * m * k];
            let b_i = &bd[i * k * n..(i + 1) * k * n];
            let c = if trans_b { kernels::mm_nt(a_i, b_i, m, k, n) } else { kernels::mm(a_i, b_i, m, k, n) };
            data.extend(c);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], data)?, Op::Bmm { a, b, trans_b }, rg))
    }

    /// NCHW convolution. Regular kernels are `[O,C,k,k]`; depthwise kernels are
    /// `[C,1,k,k]` and produce `C` output channels.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding, depthwise: bool) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let mismatch = || Error::ShapeMismatch { op: "conv2d", lhs: sx.clone(), rhs: sk.clone() };
        if sx.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || stride == 0 {
            return Err(mismatch());
        }
        let ks = sk[2];
        if ks % 2 == 0 {
            return Err(Error::InvalidShape { op: "conv2d", detail: format!("kernel size {ks} is even") });
        }
        let (batch, in_ch, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let out_ch = if depthwise {
            if sk[0] != in_ch || sk[1] != 1 {
                return Err(mismatch());
            }
            in_ch
        } else {
            if sk[1] != in_ch {
                return Err(mismatch());
            }
            sk[0]
        };
        let pad = match padding {
            Padding::Same => ks / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < ks || w + 2 * pad < ks {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {ks} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            });
        }
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let geom = ConvGeom { batch, in_ch, h, w, out_ch, k: ks, stride, pad, oh, ow, depthwise };
        let data = kernels::conv2d_forward(self.nodes[x.0].value.data(), self.nodes[k.0].value.data(), &geom);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::new(vec![batch, out_ch, oh, ow], data)?, Op::Conv2d { x, k, geom }, rg))
    }

    // ---------------------------------------------------------------- reductions

    fn reduced_shape(&self, x: Var, axes: &[usize], op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        if axes.is_empty() {
            return Err(Error::InvalidShape { op, detail: "empty axis list".into() });
        }
        let mut keep = shape.to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::InvalidShape { op, detail: format!("axis {a} out of range for {shape:?}") });
            }
            keep[a] = 1;
        }
        Ok(keep)
    }

    fn squeeze(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
        if keepdim {
            return shape.to_vec();
        }
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect()
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let keep = self.reduced_shape(x, axes, "sum")?;
        let xv = &self.nodes[x.0].value;
        let map = broadcast_index_map(&keep, xv.shape());
        let mut data = vec![T::zero(); numel(&keep)];
        for (i, &o) in map.iter().enumerate() {
            data[o] = data[o] + xv.data()[i];
        }
        let out = Tensor::new(Self::squeeze(&keep, axes, keepdim), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum { x, keep_shape: keep }, rg))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes, keepdim)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum_axes(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum over `axes`; the gradient flows to the first maximal element.
    pub fn max_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let keep = self.reduced_shape(x, axes, "max")?;
        let xv = &self.nodes[x.0].value;
        let map = broadcast_index_map(&keep, xv.shape());
        let n_out = numel(&keep);
        let mut data = vec![T::neg_infinity(); n_out];
        let mut argmax = vec![usize::MAX; n_out];
        for (i, &o) in map.iter().enumerate() {
            let v = xv.data()[i];
            if argmax[o] == usize::MAX || v > data[o] {
                data[o] = v;
                argmax[o] = i;
            }
        }
        let out = Tensor::new(Self::squeeze(&keep, axes, keepdim), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Max { x, argmax }, rg))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape { op: "softmax", detail: format!("axis {axis} for {shape:?}") });
        }
        let data = kernels::softmax(self.nodes[x.0].value.data(), &shape, axis, log);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis, log }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidShape { op: "permute", detail: format!("{perm:?} for {shape:?}") });
        }
        let out = permute_tensor(&self.nodes[x.0].value, perm);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| crate::error::invalid("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape { op: "concat", detail: format!("axis {axis} for {first:?}") });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                let chunk = pv.shape()[axis] * inner;
                data.extend_from_slice(&pv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                detail: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Zero-pads the last two axes at the bottom/right.
    pub fn pad2d(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape { op: "pad2d", detail: format!("{shape:?}") });
        }
        if pad_h == 0 && pad_w == 0 {
            return Ok(x);
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (nh, nw) = (h + pad_h, w + pad_w);
        let planes = numel(&shape[..r - 2]);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![T::zero(); planes * nh * nw];
        for p in 0..planes {
            for y in 0..h {
                let s = &src[(p * h + y) * w..][..w];
                data[(p * nh + y) * nw..][..w].copy_from_slice(s);
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = nh;
        out_shape[r - 1] = nw;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Pad2d { x }, rg))
    }

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape { op: "upsample2x", detail: format!("{shape:?}") });
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data.push(src[(p * h + y / 2) * w + xx / 2]);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = 2 * h;
        out_shape[r - 1] = 2 * w;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Upsample2x { x }, rg))
    }

    // ---------------------------------------------------------------- fused ops

    /// Multiplies by a constant elementwise mask of the same shape.
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.numel() {
            return Err(Error::ShapeMismatch { op: "mask", lhs: xv.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mask { x, mask }, rg))
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(crate::error::invalid(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        self.mask(x, mask)
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(x,0) - x·t + ln(1 + e^{-|x|})`.
    pub fn bce_logits(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_logits",
                lhs: xv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if let Some(t) = target.data().iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
            return Err(Error::Domain { op: "bce_logits", detail: format!("target {t} outside [0,1]") });
        }
        let n = T::c(xv.numel() as f64);
        let mut acc = T::zero();
        for (&l, &t) in xv.data().iter().zip(target.data()) {
            acc = acc + l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p();
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(acc / n), Op::BceLogits { x, target: target.data().to_vec() }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d(loss)/d(node) back through the tape and adds the result to
    /// the `grad` of every trainable leaf. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::Detached);
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(existing) => existing.iter_mut().zip(&a).for_each(|(e, v)| *e = *e + *v),
                None => node.grad = Some(a),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        let mut send = |v: Var, grad: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => existing.iter_mut().zip(&grad).for_each(|(e, x)| *e = *e + *x),
                slot @ None => *slot = Some(grad),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xv = val(*x).data();
                let y = out.data();
                let d: Vec<T> = match *kind {
                    UnaryKind::Neg => g.iter().map(|&g| -g).collect(),
                    UnaryKind::Exp => zip3(g, xv, y, |g, _, y| g * y),
                    UnaryKind::Log => zip3(g, xv, y, |g, x, _| g / x),
                    UnaryKind::Relu => zip3(g, xv, y, |g, x, _| if x > T::zero() { g } else { T::zero() }),
                    UnaryKind::LeakyRelu(s) => zip3(g, xv, y, |g, x, _| if x > T::zero() { g } else { g * T::c(s) }),
                    UnaryKind::Sigmoid => zip3(g, xv, y, |g, _, y| g * y * (T::one() - y)),
                    UnaryKind::Tanh => zip3(g, xv, y, |g, _, y| g * (T::one() - y * y)),
                    UnaryKind::Pow(p) => zip3(g, xv, y, |g, x, _| g * T::c(p) * x.powf(T::c(p - 1.0))),
                };
                send(*x, d);
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let shape = out.shape();
                let ma = (av.shape() != shape).then(|| broadcast_index_map(av.shape(), shape));
                let mb = (bv.shape() != shape).then(|| broadcast_index_map(bv.shape(), shape));
                let at = |k: usize| av.data()[ma.as_ref().map_or(k, |m| m[k])];
                let bt = |k: usize| bv.data()[mb.as_ref().map_or(k, |m| m[k])];
                let reduce = |local: Vec<T>, map: &Option<Vec<usize>>, n: usize| match map {
                    None => local,
                    Some(m) => {
                        let mut r = vec![T::zero(); n];
                        for (k, &j) in m.iter().enumerate() {
                            r[j] = r[j] + local[k];
                        }
                        r
                    }
                };
                let n = g.len();
                let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    BinaryKind::Mul => ((0..n).map(|k| g[k] * bt(k)).collect(), (0..n).map(|k| g[k] * at(k)).collect()),
                    BinaryKind::Div => (
                        (0..n).map(|k| g[k] / bt(k)).collect(),
                        (0..n).map(|k| -g[k] * at(k) / (bt(k) * bt(k))).collect(),
                    ),
                };
                if nodes[a.0].requires_grad {
                    send(*a, reduce(ga, &ma, av.numel()));
                }
                if nodes[b.0].requires_grad {
                    send(*b, reduce(gb, &mb, bv.numel()));
                }
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|&v| v * *scale).collect()),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if nodes[a.0].requires_grad {
                    let da = if *trans_b {
                        kernels::mm(g, bv.data(), m, n, k)
                    } else {
                        kernels::mm_nt(g, bv.data(), m, n, k)
                    };
                    send(*a, da);
                }
                if nodes[b.0].requires_grad {
                    let db = if *trans_b {
                        kernels::mm_tn(g, av.data(), n, m, k)
                    } else {
                        kernels::mm_tn(av.data(), g, k, m, n)
                    };
                    send(*b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let (mut da, mut db) = (Vec::with_capacity(av.numel()), Vec::with_capacity(bv.numel()));
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av.data()[i * m * k..(i + 1) * m * k];
                    let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        da.extend(kernels::mm(gi, bi, m, n, k));
                        db.extend(kernels::mm_tn(gi, ai, n, m, k));
                    } else {
                        da.extend(kernels::mm_nt(gi, bi, m, n, k));
                        db.extend(kernels::mm_tn(ai, gi, k, m, n));
                    }
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(val(*x).data(), val(*k).data(), g, geom);
                send(*x, dx);
                send(*k, dk);
            }
            Op::Sum { x, keep_shape } => {
                let map = broadcast_index_map(keep_shape, val(*x).shape());
                send(*x, map.iter().map(|&o| g[o]).collect());
            }
            Op::Max { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] = d[src] + g[o];
                }
                send(*x, d);
            }
            Op::Softmax { x, axis, log } => {
                let (outer, n, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + ii;
                        if *log {
                            let gs: T = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                send(*x, d);
            }
            Op::Reshape { x } => send(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor { shape: out.shape().to_vec(), data: g.to_vec() };
                send(*x, permute_tensor(&gt, &inv).data);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::split_axis(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for &p in parts {
                    let len = val(p).shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    send(p, d);
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = kernels::split_axis(xs, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    d[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, d);
            }
            Op::Pad2d { x } => {
                let xs = val(*x).shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (nh, nw) = (out.shape()[r - 2], out.shape()[r - 1]);
                let planes = numel(&xs[..r - 2]);
                let mut d = Vec::with_capacity(val(*x).numel());
                for p in 0..planes {
                    for y in 0..h {
                        d.extend_from_slice(&g[(p * nh + y) * nw..][..w]);
                    }
                }
                send(*x, d);
            }
            Op::Upsample2x { x } => {
                let xs = val(*x).shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let planes = numel(&xs[..r - 2]);
                let mut d = vec![T::zero(); val(*x).numel()];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let idx = (p * h + y / 2) * w + xx / 2;
                            d[idx] = d[idx] + g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                send(*x, d);
            }
            Op::Mask { x, mask } => send(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()),
            Op::BceLogits { x, target } => {
                let xv = val(*x).data();
                let scale = g[0] / T::c(xv.len() as f64);
                send(*x, xv.iter().zip(target).map(|(&l, &t)| (sigmoid(l) - t) * scale).collect());
            }
        }
    }
}

fn zip3<T: Scalar>(g: &[T], x: &[T], y: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
    g.iter().zip(x).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect()
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let total = x.numel();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        data.push(x.data()[pos]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor { shape: out_shape, data }
}

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels;
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable unary operation defined outside this crate.
pub trait CustomOp<T: Float> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;
    /// Gradient with respect to `x` given the upstream gradient `gy`.
    fn backward(&self, x: &Tensor<T>, y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T>;
}

enum Op<T: Float> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulSpatial(Var, Var),
    LayerNorm(Var, f64),
    Concat(Vec<Var>),
    Sum(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Gram(Var),
    CrossEntropy { logits: Var, labels: Rc<Vec<u8>>, weights: Option<Vec<f64>> },
    Custom(Var, Rc<dyn CustomOp<T>>),
}

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for one reverse-mode sweep.
///
/// A tape is built per training step and dropped afterwards.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn push_from(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push(value, op, needs)
    }

    /// A value that takes no gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf_rc(&self, t: Rc<Tensor<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = {
            let bt = b.map(|b| self.value(b));
            kernels::conv2d(&self.value(x), &self.value(w), bt.as_deref(), stride, pad)
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_from(y, Op::Conv2d { x, w, b, stride, pad }, &parents)
    }

    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = {
            let bt = b.map(|b| self.value(b));
            kernels::conv_transpose2d(&self.value(x), &self.value(w), bt.as_deref(), stride, pad)
        };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_from(y, Op::ConvT2d { x, w, b, stride, pad }, &parents)
    }

    pub fn avg_pool2(&self, x: Var) -> Var {
        let y = kernels::avg_pool2(&self.value(x));
        self.push_from(y, Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&self, x: Var) -> Var {
        let y = kernels::upsample2(&self.value(x));
        self.push_from(y, Op::Upsample2(x), &[x])
    }

    pub fn relu(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push_from(y, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let y = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push_from(y, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push_from(y, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.tanh());
        self.push_from(y, Op::Tanh(x), &[x])
    }

    /// Clamp to `[lo, hi]`; the gradient passes wherever the input lies
    /// inside the closed interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        let y = self.value(x).map(|v| v.max(l).min(h));
        self.push_from(y, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(&self.value(b), |p, q| p + q);
        self.push_from(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(&self.value(b), |p, q| p - q);
        self.push_from(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(&self.value(b), |p, q| p * q);
        self.push_from(y, Op::Mul(a, b), &[a, b])
    }

    pub fn square(&self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let k = T::of(s);
        let y = self.value(x).map(|v| v * k);
        self.push_from(y, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        let k = T::of(s);
        let y = self.value(x).map(|v| v + k);
        self.push_from(y, Op::AddScalar(x), &[x])
    }

    /// Scale every channel of `x: [N, C, H, W]` by `m: [N, 1, H, W]`.
    pub fn mul_spatial(&self, x: Var, m: Var) -> Var {
        let y = {
            let xv = self.value(x);
            let mv = self.value(m);
            let (n, c, h, w) = xv.dims4();
            assert_eq!(mv.shape(), &[n, 1, h, w], "mask shape mismatch");
            let plane = h * w;
            let mut out = xv.data().to_vec();
            for i in 0..n {
                let mask = &mv.data()[i * plane..(i + 1) * plane];
                for ch in 0..c {
                    let off = (i * c + ch) * plane;
                    for (v, &s) in out[off..off + plane].iter_mut().zip(mask) {
                        *v *= s;
                    }
                }
            }
            Tensor::from_vec(xv.shape(), out)
        };
        self.push_from(y, Op::MulSpatial(x, m), &[x, m])
    }

    /// Per-sample normalization over all of `(C, H, W)`, no affine part.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let y = {
            let xv = self.value(x);
            let n = xv.shape()[0];
            let per = xv.len() / n;
            let mut out = xv.data().to_vec();
            for chunk in out.chunks_mut(per) {
                let (mean, inv) = moments(chunk, eps);
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            Tensor::from_vec(xv.shape(), out)
        };
        self.push_from(y, Op::LayerNorm(x, eps), &[x])
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat(&self, xs: &[Var]) -> Var {
        let y = {
            let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
            let (n, _, h, w) = vals[0].dims4();
            let total_c: usize = vals.iter().map(|t| t.dims4().1).sum();
            let plane = h * w;
            let mut out = Vec::with_capacity(n * total_c * plane);
            for i in 0..n {
                for t in &vals {
                    let (tn, c, th, tw) = t.dims4();
                    assert_eq!((tn, th, tw), (n, h, w), "concat shape mismatch");
                    out.extend_from_slice(&t.data()[i * c * plane..(i + 1) * c * plane]);
                }
            }
            Tensor::from_vec(&[n, total_c, h, w], out)
        };
        self.push_from(y, Op::Concat(xs.to_vec()), xs)
    }

    pub fn sum(&self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push_from(y, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let y = (*self.value(x)).clone().reshape(shape);
        self.push_from(y, Op::Reshape(x), &[x])
    }

    /// `y = x w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            let (n, inp) = (xv.shape()[0], xv.shape()[1]);
            let out = wv.shape()[0];
            assert_eq!(wv.shape()[1], inp, "linear: width mismatch");
            let mut y: Vec<T> = (0..n).flat_map(|_| bv.data().iter().copied()).collect();
            T::gemm(n, inp, out, T::one(), xv.data(), (inp as isize, 1), wv.data(), (1, inp as isize), T::one(), &mut y, (out as isize, 1));
            Tensor::from_vec(&[n, out], y)
        };
        self.push_from(y, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Per-sample Gram matrix `F F^T` of `[N, C, H, W]` features, shape `[N, C, C]`.
    pub fn gram(&self, x: Var) -> Var {
        let y = {
            let xv = self.value(x);
            let (n, c, h, w) = xv.dims4();
            let m = h * w;
            let mut out = vec![T::zero(); n * c * c];
            for i in 0..n {
                let f = &xv.data()[i * c * m..(i + 1) * c * m];
                T::gemm(c, m, c, T::one(), f, (m as isize, 1), f, (1, m as isize), T::zero(), &mut out[i * c * c..(i + 1) * c * c], (c as isize, 1));
            }
            Tensor::from_vec(&[n, c, c], out)
        };
        self.push_from(y, Op::Gram(x), &[x])
    }

    /// Mean (optionally class-weighted) softmax cross-entropy of
    /// `[N, K, H, W]` logits against per-pixel labels.
    pub fn cross_entropy(&self, logits: Var, labels: Rc<Vec<u8>>, weights: Option<Vec<f64>>) -> Var {
        let y = {
            let lv = self.value(logits);
            let (n, k, h, w) = lv.dims4();
            assert_eq!(labels.len(), n * h * w, "label count mismatch");
            let plane = h * w;
            let mut total = 0.0f64;
            let mut norm = 0.0f64;
            for i in 0..n {
                for p in 0..plane {
                    let lab = labels[i * plane + p] as usize;
                    let (lse, _) = log_sum_exp(lv.data(), i, k, plane, p);
                    let z = lv.data()[(i * k + lab) * plane + p].as_f64();
                    let wt = weights.as_ref().map_or(1.0, |ws| ws[lab]);
                    total += wt * (lse - z);
                    norm += wt;
                }
            }
            Tensor::scalar(T::of(total / norm.max(f64::MIN_POSITIVE)))
        };
        self.push_from(y, Op::CrossEntropy { logits, labels, weights }, &[logits])
    }

    pub fn custom(&self, x: Var, op: Rc<dyn CustomOp<T>>) -> Var {
        let y = op.forward(&self.value(x));
        self.push_from(y, Op::Custom(x, op), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward requires a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gy);
                continue;
            }
            let needs = |v: Var| nodes[v.0].needs_grad;
            let val = |v: Var| Rc::clone(&nodes[v.0].value);
            let mut acc = |v: Var, g: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(existing) => existing.add_assign(&g),
                    None => grads[v.0] = Some(g),
                }
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(&val(*x), &val(*w), &gy, *stride, *pad, needs(*x));
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        kernels::conv_transpose2d_backward(&val(*x), &val(*w), &gy, *stride, *pad, needs(*x));
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
                Op::AvgPool2(x) => acc(*x, kernels::avg_pool2_backward(val(*x).shape(), &gy)),
                Op::Upsample2(x) => acc(*x, kernels::upsample2_backward(val(*x).shape(), &gy)),
                Op::Relu(x) => acc(*x, gy.zip_map(&val(*x), |g, v| if v > T::zero() { g } else { T::zero() })),
                Op::LeakyRelu(x, s) => {
                    let s = T::of(*s);
                    acc(*x, gy.zip_map(&val(*x), |g, v| if v > T::zero() { g } else { g * s }))
                }
                Op::Sigmoid(x) => acc(*x, gy.zip_map(y, |g, s| g * s * (T::one() - s))),
                Op::Tanh(x) => acc(*x, gy.zip_map(y, |g, t| g * (T::one() - t * t))),
                Op::Clamp(x, lo, hi) => {
                    let (l, h) = (T::of(*lo), T::of(*hi));
                    acc(*x, gy.zip_map(&val(*x), |g, v| if v >= l && v <= h { g } else { T::zero() }))
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy);
                }
                Op::Sub(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, gy.zip_map(&val(*b), |g, q| g * q));
                    }
                    if needs(*b) {
                        acc(*b, gy.zip_map(&val(*a), |g, p| g * p));
                    }
                }
                Op::Scale(x, s) => {
                    let k = T::of(*s);
                    acc(*x, gy.map(|g| g * k))
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, gy.reshape(&shape))
                }
                Op::MulSpatial(x, m) => {
                    let (xv, mv) = (val(*x), val(*m));
                    let (n, c, h, w) = xv.dims4();
                    let plane = h * w;
                    if needs(*x) {
                        let mut gx = gy.data().to_vec();
                        for i in 0..n {
                            let mask = &mv.data()[i * plane..(i + 1) * plane];
                            for ch in 0..c {
                                let off = (i * c + ch) * plane;
                                for (g, &s) in gx[off..off + plane].iter_mut().zip(mask) {
                                    *g *= s;
                                }
                            }
                        }
                        acc(*x, Tensor::from_vec(xv.shape(), gx));
                    }
                    if needs(*m) {
                        let mut gm = vec![T::zero(); n * plane];
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * plane;
                                for p in 0..plane {
                                    gm[i * plane + p] += gy.data()[off + p] * xv.data()[off + p];
                                }
                            }
                        }
                        acc(*m, Tensor::from_vec(mv.shape(), gm));
                    }
                }
                Op::LayerNorm(x, eps) => {
                    let xv = val(*x);
                    let n = xv.shape()[0];
                    let per = xv.len() / n;
                    let mut gx = vec![T::zero(); xv.len()];
                    for i in 0..n {
                        let xs = &xv.data()[i * per..(i + 1) * per];
                        let (mean, inv) = moments(xs, *eps);
                        let g = &gy.data()[i * per..(i + 1) * per];
                        let np = T::of(per as f64);
                        let gmean = g.iter().copied().sum::<T>() / np;
                        let gxhat = xs.iter().zip(g).map(|(&v, &gg)| gg * (v - mean) * inv).sum::<T>() / np;
                        for j in 0..per {
                            let xhat = (xs[j] - mean) * inv;
                            gx[i * per + j] = inv * (g[j] - gmean - xhat * gxhat);
                        }
                    }
                    acc(*x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::Concat(xs) => {
                    let (n, _, h, w) = gy.dims4();
                    let plane = h * w;
                    let total_c = gy.dims4().1;
                    let mut off_c = 0;
                    for &v in xs {
                        let c = val(v).dims4().1;
                        if needs(v) {
                            let mut g = Vec::with_capacity(n * c * plane);
                            for i in 0..n {
                                let start = (i * total_c + off_c) * plane;
                                g.extend_from_slice(&gy.data()[start..start + c * plane]);
                            }
                            acc(v, Tensor::from_vec(&[n, c, h, w], g));
                        }
                        off_c += c;
                    }
                }
                Op::Sum(x) => {
                    let g = gy.data()[0];
                    acc(*x, Tensor::full(val(*x).shape(), g))
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                    let out = wv.shape()[0];
                    if needs(*x) {
                        let mut gx = vec![T::zero(); n * inp];
                        T::gemm(n, out, inp, T::one(), gy.data(), (out as isize, 1), wv.data(), (inp as isize, 1), T::zero(), &mut gx, (inp as isize, 1));
                        acc(*x, Tensor::from_vec(xv.shape(), gx));
                    }
                    let mut gw = vec![T::zero(); out * inp];
                    T::gemm(out, n, inp, T::one(), gy.data(), (1, out as isize), xv.data(), (inp as isize, 1), T::zero(), &mut gw, (inp as isize, 1));
                    acc(*w, Tensor::from_vec(wv.shape(), gw));
                    let mut gb = vec![T::zero(); out];
                    for row in gy.data().chunks(out) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    acc(*b, Tensor::from_vec(&[out], gb));
                }
                Op::Gram(x) => {
                    let xv = val(*x);
                    let (n, c, h, w) = xv.dims4();
                    let m = h * w;
                    let mut gx = vec![T::zero(); xv.len()];
                    for i in 0..n {
                        let g = &gy.data()[i * c * c..(i + 1) * c * c];
                        let sym: Vec<T> = (0..c * c).map(|k| g[k] + g[(k % c) * c + k / c]).collect();
                        let f = &xv.data()[i * c * m..(i + 1) * c * m];
                        T::gemm(c, c, m, T::one(), &sym, (c as isize, 1), f, (m as isize, 1), T::zero(), &mut gx[i * c * m..(i + 1) * c * m], (m as isize, 1));
                    }
                    acc(*x, Tensor::from_vec(xv.shape(), gx));
                }
                Op::CrossEntropy { logits, labels, weights } => {
                    let lv = val(*logits);
                    let (n, k, h, w) = lv.dims4();
                    let plane = h * w;
                    let norm: f64 = labels.iter().map(|&l| weights.as_ref().map_or(1.0, |ws| ws[l as usize])).sum();
                    let scale = gy.data()[0].as_f64() / norm.max(f64::MIN_POSITIVE);
                    let mut gl = vec![T::zero(); lv.len()];
                    for i in 0..n {
                        for p in 0..plane {
                            let lab = labels[i * plane + p] as usize;
                            let wt = weights.as_ref().map_or(1.0, |ws| ws[lab]);
                            let (lse, _) = log_sum_exp(lv.data(), i, k, plane, p);
                            for cls in 0..k {
                                let idx = (i * k + cls) * plane + p;
                                let prob = (lv.data()[idx].as_f64() - lse).exp();
                                let target = if cls == lab { 1.0 } else { 0.0 };
                                gl[idx] = T::of(scale * wt * (prob - target));
                            }
                        }
                    }
                    acc(*logits, Tensor::from_vec(lv.shape(), gl));
                }
                Op::Custom(x, op) => {
                    let g = op.backward(&val(*x), y, &gy);
                    acc(*x, g)
                }
            }
        }
        Grads { grads }
    }
}

fn moments<T: Float>(xs: &[T], eps: f64) -> (T, T) {
    let n = T::of(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of(eps)).sqrt())
}

fn log_sum_exp<T: Float>(data: &[T], i: usize, k: usize, plane: usize, p: usize) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for cls in 0..k {
        let v = data[(i * k + cls) * plane + p].as_f64();
        if v > best {
            best = v;
            arg = cls;
        }
    }
    let s: f64 = (0..k).map(|cls| (data[(i * k + cls) * plane + p].as_f64() - best).exp()).sum();
    (best + s.ln(), arg)
}

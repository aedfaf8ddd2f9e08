//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! The training loss, the finite-difference gradient suite, and the
//! effective-receptive-field probes all need gradients through the same
//! forward code, so every model op is expressed as a tape node with a
//! hand-written adjoint. The engine is generic over `f32`/`f64`: training
//! runs in single precision, gradient checks in double.

pub mod kernels;
mod params;

pub use params::{ParamId, ParamStore};

use std::collections::HashMap;

use ndarray::{ArrayD, Axis, IxDyn, Slice, Zip};
use num_traits::Float;

/// Element type for tapes: `f32` or `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + Float
    + ndarray::ScalarOperand
    + std::fmt::Display
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Standard normal CDF, evaluated in double precision.
    fn norm_cdf(self) -> Self {
        Self::from_f64(0.5 * statrs::function::erf::erfc(-self.to_f64() / std::f64::consts::SQRT_2))
    }

    /// Standard normal density.
    fn norm_pdf(self) -> Self {
        let x = self.to_f64();
        Self::from_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Exact (erf-based) GELU.
    fn gelu(self) -> Self {
        let x = self.to_f64();
        Self::from_f64(x * 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2)))
    }

    fn gelu_grad(self) -> Self {
        let x = self.to_f64();
        let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        Self::from_f64(cdf + x * pdf)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulBroadcast(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sq(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    NormalCdf(Var),
    ClampInward(Var, T, T),
    RoundSte(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize, usize),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    DwConv2d { x: Var, w: Var, pad: usize },
    ChanConv1d { x: Var, w: Var },
    DepthToSpace(Var, usize),
    WindowPartition(Var, usize),
    WindowReverse { x: Var, ws: usize, h: usize, w: usize },
    Dwt2(Var, T),
    Idwt2(Var, T),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    requires: bool,
}

/// Gradients of a scalar root with respect to tape leaves.
pub struct Grads<T: Scalar> {
    leaf: HashMap<usize, ArrayD<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.leaf.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.leaf.remove(&v.0)
    }
}

/// Recording tape: append-only op graph with stored forward values.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_map: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_map: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        let requires = match &op {
            Op::Leaf => false,
            _ => self.op_parents(&op).iter().any(|p| self.nodes[p.0].requires),
        };
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn op_parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddBroadcast(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulBroadcast(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sq(a)
            | Op::LeakyRelu(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::NormalCdf(a)
            | Op::ClampInward(a, _, _)
            | Op::RoundSte(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Transpose(a, _)
            | Op::Slice(a, _, _, _)
            | Op::Softmax(a)
            | Op::DepthToSpace(a, _)
            | Op::WindowPartition(a, _)
            | Op::Dwt2(a, _)
            | Op::Idwt2(a, _) => vec![*a],
            Op::WindowReverse { x, .. } => vec![*x],
            Op::Concat(parts, _) => parts.clone(),
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::DwConv2d { x, w, .. } | Op::ChanConv1d { x, w } => vec![*x, *w],
        }
    }

    /// Constant tensor: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input leaf that accumulates a gradient (receptive-field probes,
    /// finite-difference checks).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires = true;
        v
    }

    /// Mount a stored parameter; repeated mounts return the same node so the
    /// gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_map.get(&id.0) {
            return *v;
        }
        let value = store.value(id).mapv(T::from_f64);
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires = true;
        self.param_map.insert(id.0, v);
        v
    }

    /// Node id for a mounted parameter, if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_map.get(&id.0).copied()
    }

    /// All (param, node) pairs mounted on this tape.
    pub fn mounted_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_map.iter().map(|(k, v)| (ParamId(*k), *v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` where `b` broadcasts to `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        assert_eq!(v.shape(), self.shape(a), "add_broadcast must not grow lhs");
        self.push(v, Op::AddBroadcast(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    /// `a * b` where `b` broadcasts to `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        assert_eq!(v.shape(), self.shape(a), "mul_broadcast must not grow lhs");
        self.push(v, Op::MulBroadcast(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        self.push(v, Op::AddScalar(a, s))
    }

    pub fn sq(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Sq(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.gelu());
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus_scalar);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.norm_cdf());
        self.push(v, Op::NormalCdf(a))
    }

    /// Clamp that lets gradients pass when they point back into `[lo, hi]`,
    /// so clamped values are not permanently stuck.
    pub fn clamp_inward(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(lo).min(hi));
        self.push(v, Op::ClampInward(a, lo, hi))
    }

    /// Round to nearest (ties away from zero) with a straight-through gradient.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.round());
        self.push(v, Op::RoundSte(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.iter().copied().sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.nodes[a.0].value.len() as f64);
        let s: T = self.nodes[a.0].value.iter().copied().sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s / n), Op::Mean(a))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = kernels::reshape_to(&self.nodes[a.0].value.view(), shape);
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Transpose(a, perm.to_vec()))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::Slice(a, axis, start, len))
    }

    // ---- linear algebra ----

    /// `x (..., Din) · w (Din, Dout) + b (Dout)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        assert_eq!(xs.last().unwrap(), &ws[0], "linear dims");
        let dout = ws[1];
        let x2 = kernels::as_rows(&self.nodes[x.0].value.view());
        let w2 = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = x2.dot(&w2).into_dyn();
        if let Some(b) = b {
            let b1 = self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            kernels::add_bias_last(&mut out, &b1);
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        let out = kernels::reshape_to(&out.view(), &out_shape);
        self.push(out, Op::Linear { x, w, b })
    }

    /// Batched matmul `(B,M,K)·(B,K,N)`, or `(B,M,K)·(B,N,K)ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let v = kernels::bmm(
            &self.nodes[a.0].value.view(),
            &self.nodes[b.0].value.view(),
            trans_b,
        );
        self.push(v, Op::Bmm { a, b, trans_b })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), |m, x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let s: T = row.iter().copied().sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::Softmax(a))
    }

    /// Layer norm over the last axis with learned scale/offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta shape");
        let g = self.nodes[gamma.0].value.clone();
        let bt = self.nodes[beta.0].value.clone();
        let mut v = self.nodes[x.0].value.clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let n = T::from_f64(d as f64);
            let mu: T = row.iter().copied().sum::<T>() / n;
            let var: T = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
            let inv = (var + eps).sqrt().recip();
            for (i, val) in row.iter_mut().enumerate() {
                *val = (*val - mu) * inv * g[[i]] + bt[[i]];
            }
        }
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d_fwd(
            &self.nodes[x.0].value.view(),
            &self.nodes[w.0].value.view(),
            b.map(|b| self.nodes[b.0].value.view()).as_ref(),
            stride,
            pad,
        );
        self.push(v, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Depthwise k×k convolution, stride 1, zero padding `pad`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let v = kernels::dwconv2d_fwd(
            &self.nodes[x.0].value.view(),
            &self.nodes[w.0].value.view(),
            pad,
        );
        self.push(v, Op::DwConv2d { x, w, pad })
    }

    /// Depthwise 1-D convolution along the channel-token axis of `(n, C, L)`.
    pub fn chanconv1d(&mut self, x: Var, w: Var) -> Var {
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let v = kernels::chanconv1d_fwd(&self.nodes[x.0].value.view(), &wv);
        self.push(v, Op::ChanConv1d { x, w })
    }

    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Var {
        let v = kernels::depth_to_space(&self.nodes[x.0].value.view(), r);
        self.push(v, Op::DepthToSpace(x, r))
    }

    pub fn window_partition(&mut self, x: Var, ws: usize) -> Var {
        let v = kernels::window_partition(&self.nodes[x.0].value.view(), ws);
        self.push(v, Op::WindowPartition(x, ws))
    }

    pub fn window_reverse(&mut self, x: Var, ws: usize, h: usize, w: usize) -> Var {
        let v = kernels::window_reverse(&self.nodes[x.0].value.view(), ws, h, w);
        self.push(v, Op::WindowReverse { x, ws, h, w })
    }

    /// Haar analysis transform with the given scale factor (0.5 = orthonormal).
    pub fn dwt2(&mut self, x: Var, factor: T) -> Var {
        let v = kernels::dwt2_kernel(&self.nodes[x.0].value.view(), factor);
        self.push(v, Op::Dwt2(x, factor))
    }

    /// Haar synthesis transform with the given scale factor (0.5 = orthonormal).
    pub fn idwt2(&mut self, x: Var, factor: T) -> Var {
        let v = kernels::idwt2_kernel(&self.nodes[x.0].value.view(), factor);
        self.push(v, Op::Idwt2(x, factor))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root; returns gradients for all leaves
    /// (params and `leaf()` inputs) reachable from the root.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), T::one()));
        let mut out = HashMap::new();
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                out.insert(id, g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Grads { leaf: out }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], v: Var, delta: ArrayD<T>) {
        if !self.nodes[v.0].requires {
            return;
        }
        debug_assert_eq!(delta.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, id: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let val = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, g.clone());
                let db = kernels::reduce_to_shape(&g.view(), self.shape(*b));
                self.acc(grads, *b, db);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g * &self.nodes[b.0].value);
                self.acc(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::MulBroadcast(a, b) => {
                let bb = &self.nodes[b.0].value;
                self.acc(grads, *a, g * bb);
                let prod = g * &self.nodes[a.0].value;
                let db = kernels::reduce_to_shape(&prod.view(), self.shape(*b));
                self.acc(grads, *b, db);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                self.acc(grads, *a, g / bv);
                let db = Zip::from(g)
                    .and(val)
                    .and(bv)
                    .map_collect(|&g, &y, &b| -g * y / b);
                self.acc(grads, *b, db);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.mapv(|x| x * *s)),
            Op::AddScalar(a, _) => self.acc(grads, *a, g.clone()),
            Op::Sq(a) => {
                let two = T::from_f64(2.0);
                let da = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * x * two);
                self.acc(grads, *a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let da = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| if x > T::zero() { g } else { g * *slope });
                self.acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * x.gelu_grad());
                self.acc(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = Zip::from(g).and(val).map_collect(|&g, &y| g * (T::one() - y * y));
                self.acc(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = Zip::from(g).and(val).map_collect(|&g, &y| g * y * (T::one() - y));
                self.acc(grads, *a, da);
            }
            Op::Softplus(a) => {
                let da = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * sigmoid_scalar(x));
                self.acc(grads, *a, da);
            }
            Op::Exp(a) => self.acc(grads, *a, g * val),
            Op::Ln(a) => self.acc(grads, *a, g / &self.nodes[a.0].value),
            Op::NormalCdf(a) => {
                let da = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| g * x.norm_pdf());
                self.acc(grads, *a, da);
            }
            Op::ClampInward(a, lo, hi) => {
                let da = Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&g, &x| {
                        let inside = x >= *lo && x <= *hi;
                        let pulls_up = x < *lo && g < T::zero();
                        let pulls_down = x > *hi && g > T::zero();
                        if inside || pulls_up || pulls_down {
                            g
                        } else {
                            T::zero()
                        }
                    });
                self.acc(grads, *a, da);
            }
            Op::RoundSte(a) => self.acc(grads, *a, g.clone()),
            Op::Sum(a) => {
                let gs = *g.iter().next().unwrap();
                let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs);
                self.acc(grads, *a, da);
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.nodes[a.0].value.len() as f64);
                let gs = *g.iter().next().unwrap() / n;
                let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gs);
                self.acc(grads, *a, da);
            }
            Op::Reshape(a) => {
                let da = kernels::reshape_to(&g.view(), self.shape(*a));
                self.acc(grads, *a, da);
            }
            Op::Transpose(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let da = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                self.acc(grads, *a, da);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let dp = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    self.acc(grads, *p, dp);
                    offset += len;
                }
            }
            Op::Slice(a, axis, start, len) => {
                let mut da = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                da.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                self.acc(grads, *a, da);
            }
            Op::Linear { x, w, b } => {
                let x2 = kernels::as_rows(&self.nodes[x.0].value.view());
                let w2 = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let g2 = kernels::as_rows(&g.view());
                let dx2 = g2.dot(&w2.t());
                let dx = kernels::reshape_to(&dx2.into_dyn().view(), self.shape(*x));
                self.acc(grads, *x, dx);
                let dw = x2.t().dot(&g2).into_dyn();
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if *trans_b {
                    // y = a · bᵀ  →  da = g · b, db = gᵀ · a
                    let da = kernels::bmm(&g.view(), &bv.view(), false);
                    self.acc(grads, *a, da);
                    let gt = transpose_last2(g);
                    let db = kernels::bmm(&gt.view(), &av.view(), false);
                    self.acc(grads, *b, db);
                } else {
                    // y = a · b  →  da = g · bᵀ, db = aᵀ · g
                    let da = kernels::bmm(&g.view(), &bv.view(), true);
                    self.acc(grads, *a, da);
                    let at = transpose_last2(av);
                    let db = kernels::bmm(&at.view(), &g.view(), false);
                    self.acc(grads, *b, db);
                }
            }
            Op::Softmax(a) => {
                let prod = g * val;
                let s = kernels::sum_last_keepdim(&prod.view());
                let da = val * &(g - &s);
                self.acc(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let d = *xv.shape().last().unwrap();
                let n = T::from_f64(d as f64);
                let mut dx = ArrayD::<T>::zeros(xv.raw_dim());
                let mut dgamma = ArrayD::<T>::zeros(IxDyn(&[d]));
                let mut dbeta = ArrayD::<T>::zeros(IxDyn(&[d]));
                let last = xv.ndim() - 1;
                for ((row_x, row_g), mut row_dx) in xv
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(g.lanes(Axis(last)))
                    .zip(dx.lanes_mut(Axis(last)))
                {
                    let mu: T = row_x.iter().copied().sum::<T>() / n;
                    let var: T = row_x.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
                    let inv = (var + *eps).sqrt().recip();
                    // xhat_i and dxhat_i
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    let mut xhat = Vec::with_capacity(d);
                    let mut dxhat = Vec::with_capacity(d);
                    for i in 0..d {
                        let xh = (row_x[i] - mu) * inv;
                        let dxh = row_g[i] * gv[[i]];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh;
                        dgamma[[i]] = dgamma[[i]] + row_g[i] * xh;
                        dbeta[[i]] = dbeta[[i]] + row_g[i];
                        xhat.push(xh);
                        dxhat.push(dxh);
                    }
                    mean_dxh = mean_dxh / n;
                    mean_dxh_xh = mean_dxh_xh / n;
                    for i in 0..d {
                        row_dx[i] = inv * (dxhat[i] - mean_dxh - xhat[i] * mean_dxh_xh);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let want_dx = self.nodes[x.0].requires;
                let (dx, dw, db) = kernels::conv2d_bwd(
                    &self.nodes[x.0].value.view(),
                    &self.nodes[w.0].value.view(),
                    &g.view(),
                    *stride,
                    *pad,
                    want_dx,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::DwConv2d { x, w, pad } => {
                let (dx, dw) = kernels::dwconv2d_bwd(
                    &self.nodes[x.0].value.view(),
                    &self.nodes[w.0].value.view(),
                    &g.view(),
                    *pad,
                );
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
            }
            Op::ChanConv1d { x, w } => {
                let wv = self.nodes[w.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                let (dx, dw) =
                    kernels::chanconv1d_bwd(&self.nodes[x.0].value.view(), &wv, &g.view());
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
            }
            Op::DepthToSpace(a, r) => {
                let da = kernels::space_to_depth(&g.view(), *r);
                self.acc(grads, *a, da);
            }
            Op::WindowPartition(a, ws) => {
                let s = self.shape(*a);
                let (h, w) = (s[1], s[2]);
                let da = kernels::window_reverse(&g.view(), *ws, h, w);
                self.acc(grads, *a, da);
            }
            Op::WindowReverse { x, ws, .. } => {
                let da = kernels::window_partition(&g.view(), *ws);
                self.acc(grads, *x, da);
            }
            Op::Dwt2(a, f) => {
                let da = kernels::idwt2_kernel(&g.view(), *f);
                self.acc(grads, *a, da);
            }
            Op::Idwt2(a, f) => {
                let da = kernels::dwt2_kernel(&g.view(), *f);
                self.acc(grads, *a, da);
            }
        }
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    // ln(1 + e^x), stable on both tails
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

fn transpose_last2<T: Scalar>(a: &ArrayD<T>) -> ArrayD<T> {
    let nd = a.ndim();
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(nd - 1, nd - 2);
    a.view().permuted_axes(IxDyn(&perm)).as_standard_layout().to_owned()
}

//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node and returns its
//! [`Var`] handle. Graphs are cheap and meant to be rebuilt per step; drop one
//! to release all intermediate activations.

use crate::error::{ensure, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{
    attention_batched_backward, conv3d_backward, conv3d_padded, linear, linear_backward, rms_norm,
    rms_norm_backward, silu, AttentionSaved, Padding3d, Scalar, Tensor,
};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        eps: T,
        axis: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        saved: Option<AttentionSaved<T>>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: Padding3d,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Cat {
        parts: Vec<Var>,
        axis: usize,
    },
    Expand(Var),
    Upsample2x(Var),
    Rope {
        x: Var,
        cos: Tensor<T>,
        sin: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
        }
    }

    /// A graph that records no backward information.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
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

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked.
    pub fn input_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = silu(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::f(t.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Linear { x, w, b }, rg))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: T, axis: usize) -> Result<Var> {
        let v = rms_norm(self.value(x), gain.map(|g| self.value(g)), eps, axis)?;
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g));
        Ok(self.push(v, Op::RmsNorm { x, gain, eps, axis }, rg))
    }

    /// Batched attention, `q (N, L, d)`, `k (N, S, d)`, `v (N, S, dv)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, saved) =
            crate::tensor::attention_forward(self.value(q), self.value(k), self.value(v))?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let saved = (rg && self.grad_enabled).then_some(saved);
        Ok(self.push(out, Op::Attention { q, k, v, saved }, rg))
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: Padding3d,
    ) -> Result<Var> {
        let v = conv3d_padded(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Conv { x, w, b, stride, pad }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn cat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::cat(&refs, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Cat { parts: parts.to_vec(), axis }, rg))
    }

    /// Repeat size-1 axes of `a` to reach `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = expand(self.value(a), shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Expand(a), rg))
    }

    /// Nearest-neighbour 2x spatial upsampling of `(C, T, H, W)`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let v = upsample2x(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Upsample2x(a), rg))
    }

    /// Rotate consecutive feature pairs of `x (N, L, d)` by per-position angles.
    ///
    /// `cos` and `sin` have shape `(L, d / 2)`.
    pub fn rope(&mut self, x: Var, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Var> {
        let v = rope_apply(self.value(x), cos, sin, false)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Rope {
                x,
                cos: cos.clone(),
                sin: sin.clone(),
            },
            rg,
        ))
    }

    /// Multiply `(.., D)` activations by `(1 + scale)` and add `shift`, both
    /// given per leading batch and broadcast over the middle axis.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bshape = bcast_shape(&shape);
        let sc = self.reshape(scale, &bshape)?;
        let sc = self.expand(sc, &shape)?;
        let sh = self.reshape(shift, &bshape)?;
        let sh = self.expand(sh, &shape)?;
        let xs = self.mul(x, sc)?;
        let y = self.add(x, xs)?;
        self.add(y, sh)
    }

    /// `x * gate` with `gate (B, D)` broadcast over the middle axis of `x (B, L, D)`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let g = self.reshape(gate, &bcast_shape(&shape))?;
        let g = self.expand(g, &shape)?;
        self.mul(x, g)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        ensure!(
            self.value(loss).numel() == 1,
            Error::invalid("backward", "loss must be a single element")
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), "silu", |g, x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    g * s * (T::one() + x * (T::one() - s))
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(&node.value)?)?,
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), "abs", |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Square(a) => {
                let two = T::f(2.0);
                let d = g.zip_map(self.value(*a), "square", |g, x| two * g * x)?;
                self.accumulate(grads, *a, d)?;
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv))?;
            }
            Op::MeanAll(a) => {
                let n = T::f(self.value(*a).numel() as f64);
                let gv = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv))?;
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = linear_backward(self.value(*x), self.value(*w), g)?;
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *w, gw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::RmsNorm { x, gain, eps, axis } => {
                let (gx, gg) =
                    rms_norm_backward(self.value(*x), gain.map(|v| self.value(v)), *eps, *axis, g)?;
                self.accumulate(grads, *x, gx)?;
                if let (Some(v), Some(gg)) = (gain, gg) {
                    self.accumulate(grads, *v, gg)?;
                }
            }
            Op::Attention { q, k, v, saved } => {
                let saved = saved
                    .as_ref()
                    .ok_or_else(|| Error::invalid("backward", "attention recorded without grad"))?;
                let (gq, gk, gv) = attention_batched_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    saved,
                    g,
                )?;
                self.accumulate(grads, *q, gq)?;
                self.accumulate(grads, *k, gk)?;
                self.accumulate(grads, *v, gv)?;
            }
            Op::Conv { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *pad,
                    g,
                    self.rg(*x),
                )?;
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx)?;
                }
                self.accumulate(grads, *w, gw)?;
                if let Some(b) = b {
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.reshape(self.shape(*a))?)?,
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?)?;
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x).to_vec();
                let len = g.dim(*axis);
                let mut parts = Vec::new();
                let mut pieces: Vec<Tensor<T>> = Vec::new();
                if *start > 0 {
                    let mut s = full.clone();
                    s[*axis] = *start;
                    pieces.push(Tensor::zeros(&s));
                }
                let after = full[*axis] - start - len;
                let tail = (after > 0).then(|| {
                    let mut s = full.clone();
                    s[*axis] = after;
                    Tensor::zeros(&s)
                });
                parts.extend(pieces.iter());
                parts.push(g);
                if let Some(t) = tail.as_ref() {
                    parts.push(t);
                }
                self.accumulate(grads, *x, Tensor::cat(&parts, *axis)?)?;
            }
            Op::Cat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        self.accumulate(grads, p, g.narrow(*axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Expand(a) => {
                let gs = reduce_to(g, self.shape(*a));
                self.accumulate(grads, *a, gs)?;
            }
            Op::Upsample2x(a) => self.accumulate(grads, *a, upsample2x_backward(g))?,
            Op::Rope { x, cos, sin } => {
                self.accumulate(grads, *x, rope_apply(g, cos, sin, true)?)?;
            }
        }
        Ok(())
    }

    /// Gradients of every parameter bound through [`Graph::param`].
    pub fn param_grads(&self, grads: &mut Grads<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// `(B, 1, .., 1, D)` for an activation shape `(B, .., D)`.
fn bcast_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    s[0] = shape[0];
    s[shape.len() - 1] = shape[shape.len() - 1];
    s
}

fn expand<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    ensure!(
        a.rank() == shape.len(),
        Error::shape("expand", "rank", shape.len(), a.rank())
    );
    for (ax, (&s, &t)) in a.shape().iter().zip(shape).enumerate() {
        ensure!(
            s == t || s == 1,
            Error::shape("expand", format!("axis {ax}"), format!("1 or {t}"), s)
        );
    }
    let src = crate::tensor::strides(a.shape());
    let eff: Vec<usize> = a
        .shape()
        .iter()
        .zip(&src)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(a.data()[off]);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Sum `g` over the axes where `target` has extent 1.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let src = crate::tensor::strides(target);
    let eff: Vec<usize> = target
        .iter()
        .zip(&src)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let shape = g.shape();
    let mut out = vec![T::zero(); target.iter().product()];
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for &v in g.data() {
        out[off] += v;
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(target.to_vec(), out).expect("target shape is valid")
}

pub(crate) fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank("upsample2x", 4)?;
    let (c, t, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Vec::with_capacity(c * t * h * w * 4);
    for plane in x.data().chunks(h * w) {
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::new(vec![c, t, 2 * h, 2 * w], out)
}

fn upsample2x_backward<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (c, t, h2, w2) = (g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![T::zero(); c * t * h * w];
    for (p, plane) in g.data().chunks(h2 * w2).enumerate() {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += plane[y * w2 + x];
            }
        }
    }
    Tensor::new(vec![c, t, h, w], out).expect("non-empty shape")
}

/// Pairwise rotation; `inverse` applies the transpose (used for gradients).
fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    cos: &Tensor<T>,
    sin: &Tensor<T>,
    inverse: bool,
) -> Result<Tensor<T>> {
    x.expect_rank("rope", 3)?;
    let (l, d) = (x.dim(1), x.dim(2));
    ensure!(d % 2 == 0, Error::shape("rope", "axis 2 (head dim)", "even", d));
    ensure!(
        cos.shape() == [l, d / 2] && sin.shape() == [l, d / 2],
        Error::shape("rope", "angle table", format!("[{l}, {}]", d / 2), format!("{:?}", cos.shape()))
    );
    let mut out = x.data().to_vec();
    let (c, s) = (cos.data(), sin.data());
    for seq in out.chunks_mut(l * d) {
        for pos in 0..l {
            for i in 0..d / 2 {
                let (cv, mut sv) = (c[pos * d / 2 + i], s[pos * d / 2 + i]);
                if inverse {
                    sv = -sv;
                }
                let a = seq[pos * d + 2 * i];
                let b = seq[pos * d + 2 * i + 1];
                seq[pos * d + 2 * i] = a * cv - b * sv;
                seq[pos * d + 2 * i + 1] = a * sv + b * cv;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` with respect to every entry of `x`.
    fn check_grad(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.input_grad(x.clone());
        let loss = f(&mut g, v);
        let grads = g.backward(loss).unwrap();
        let an = grads.get(v).unwrap().clone();
        let h = 1e-6;
        for i in 0..x.numel() {
            let eval = |d: f64| {
                let mut t = x.clone();
                t.data_mut()[i] += d;
                let mut g = Graph::inference();
                let v = g.input(t);
                let l = f(&mut g, v);
                g.value(l).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = an.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs analytic {a}");
        }
    }

    fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = g.input(Tensor::randn(g.shape(y), &mut r));
        let m = g.mul(y, p).unwrap();
        g.sum_all(m)
    }

    #[test]
    fn elementwise_and_shape_ops() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
        check_grad(&x, |g, v| {
            let a = g.silu(v);
            let b = g.square(a);
            let c = g.exp(v);
            let d = g.scale(c, 0.3);
            let e = g.sub(b, d).unwrap();
            let f = g.permute(e, &[2, 0, 1]).unwrap();
            let h = g.narrow(f, 0, 1, 2).unwrap();
            let k = g.reshape(h, &[2, 6]).unwrap();
            let k2 = g.abs(k);
            let m = g.cat(&[k2, k], 1).unwrap();
            probe_loss(g, m, 1)
        });
    }

    #[test]
    fn broadcast_ops() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 3, 4], &mut r);
        let shift = Tensor::<f64>::randn(&[2, 4], &mut r);
        check_grad(&x, |g, v| {
            let s = g.input(shift.clone());
            let y = g.modulate(v, s, s).unwrap();
            probe_loss(g, y, 2)
        });
        check_grad(&shift, |g, s| {
            let xv = g.input(x.clone());
            let y = g.modulate(xv, s, s).unwrap();
            let z = g.gate(y, s).unwrap();
            probe_loss(g, z, 3)
        });
    }

    #[test]
    fn layer_ops() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], &mut r);
        let w = Tensor::<f64>::randn(&[3, 2, 2, 3, 3], &mut r);
        check_grad(&x, |g, v| {
            let wv = g.input(w.clone());
            let y = g.conv3d(v, wv, None, [1, 1, 1], ConvSpec::causal(2, 3, [2, 3, 3]).padding()).unwrap();
            let y = g.upsample2x(y).unwrap();
            let y = g.rms_norm(y, None, 1e-3, 0).unwrap();
            probe_loss(g, y, 4)
        });
        let q = Tensor::<f64>::randn(&[2, 5, 4], &mut r);
        let cos = Tensor::<f64>::randn(&[5, 2], &mut r);
        let sin = Tensor::<f64>::randn(&[5, 2], &mut r);
        check_grad(&q, |g, v| {
            let rq = g.rope(v, &cos, &sin).unwrap();
            let w = g.input(Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.37).sin()));
            let kv = g.linear(v, w, None).unwrap();
            let o = g.attention(rq, kv, kv).unwrap();
            probe_loss(g, o, 5)
        });
    }

    #[test]
    fn rope_preserves_norm_with_unit_angles() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[1, 3, 4], &mut r);
        let ang = Tensor::<f64>::randn(&[3, 2], &mut r);
        let y = rope_apply(&x, &ang.map(f64::cos), &ang.map(f64::sin), false).unwrap();
        assert!((y.l2_norm() - x.l2_norm()).abs() < 1e-12);
        let back = rope_apply(&y, &ang.map(f64::cos), &ang.map(f64::sin), true).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f32>::inference();
        let a = g.input_grad(Tensor::ones(&[2]));
        let b = g.square(a);
        assert!(!g.rg(b));
    }
}

//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so walking them backwards is a valid topological order.

use std::collections::BTreeMap;

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::kernels::{self, BinaryOp, ChannelAttnGeom, ConvGeom, SobelDir, UnaryOp, WindowGeom};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Maximum(Var, Var),
    Mean(Var, [bool; 4]),
    Narrow(Var, usize),
    Concat(Var, Var),
    ReflectPad(Var),
    Crop(Var),
    PixelShuffle(Var, usize),
    Conv(Var, Var, Option<Var>, ConvGeom),
    Depthwise(Var, Var, Option<Var>),
    WindowAttn(Var, WindowGeom, Vec<T>),
    ChannelAttn([Var; 4], ChannelAttnGeom, Vec<T>),
    BoxSum(Var, usize, usize),
    Sobel(Var, SobelDir),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: BTreeMap<String, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), bound: BTreeMap::new() }
    }

    pub fn without_params() -> Self {
        Graph { store: None, nodes: Vec::new(), bound: BTreeMap::new() }
    }

    /// A leaf that receives a gradient (e.g. an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters used so far, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Softmax maps recorded by attention nodes, with their row length.
    pub fn attention_maps(&self) -> Vec<(usize, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::WindowAttn(_, g, p) => Some((g.window * g.window, p.as_slice())),
                Op::ChannelAttn(v, g, p) => Some((self.nodes[v[0].0].value.shape()[1] / g.heads, p.as_slice())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss).len() != 1 {
            return Err(Error::Dimension(format!("backward from non-scalar {:?}", self.val(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let send = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, t: Tensor<T>| {
                if !self.ng(v) {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => grads[v.0] = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Binary(op, a, b) => {
                    let (ga, gb) = kernels::binary_backward(*op, self.val(*a), self.val(*b), &g);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Unary(op, x) => {
                    let gx = kernels::unary_backward(*op, self.val(*x), &node.value, &g);
                    send(&mut grads, *x, gx);
                }
                Op::Maximum(a, b) => {
                    let (ga, gb) = kernels::maximum_backward(self.val(*a), self.val(*b), &g);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::Mean(x, axes) => {
                    let gx = kernels::mean_over_backward(self.val(*x).shape(), *axes, &g);
                    send(&mut grads, *x, gx);
                }
                Op::Narrow(x, start) => {
                    let gx = kernels::narrow_channels_backward(self.val(*x).shape(), *start, &g);
                    send(&mut grads, *x, gx);
                }
                Op::Concat(a, b) => {
                    let ca = self.val(*a).shape()[1];
                    let cb = self.val(*b).shape()[1];
                    if self.ng(*a) {
                        send(&mut grads, *a, kernels::narrow_channels(&g, 0, ca)?);
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, kernels::narrow_channels(&g, ca, cb)?);
                    }
                }
                Op::ReflectPad(x) => {
                    let gx = kernels::reflect_pad_backward(self.val(*x).shape(), &g);
                    send(&mut grads, *x, gx);
                }
                Op::Crop(x) => {
                    let gx = kernels::crop_backward(self.val(*x).shape(), &g);
                    send(&mut grads, *x, gx);
                }
                Op::PixelShuffle(x, r) => {
                    send(&mut grads, *x, kernels::pixel_unshuffle(&g, *r)?);
                }
                Op::Conv(x, w, b, geom) => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.val(*x), self.val(*w), b.is_some(), *geom, &g, self.ng(*x));
                    if let Some(dx) = dx {
                        send(&mut grads, *x, dx);
                    }
                    send(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        send(&mut grads, *b, db);
                    }
                }
                Op::Depthwise(x, w, b) => {
                    let (dx, dw, db) = kernels::depthwise3x3_backward(self.val(*x), self.val(*w), b.is_some(), &g);
                    send(&mut grads, *x, dx);
                    send(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        send(&mut grads, *b, db);
                    }
                }
                Op::WindowAttn(qkv, geom, probs) => {
                    let d = kernels::window_attention_backward(self.val(*qkv), probs, *geom, &g);
                    send(&mut grads, *qkv, d);
                }
                Op::ChannelAttn([q, k, v, gamma], geom, probs) => {
                    let (dq, dk, dv, dg) = kernels::channel_attention_backward(
                        self.val(*q),
                        self.val(*k),
                        self.val(*v),
                        self.val(*gamma),
                        probs,
                        *geom,
                        &g,
                    );
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                    send(&mut grads, *gamma, dg);
                }
                Op::BoxSum(x, win, stride) => {
                    let gx = kernels::box_sum_backward(self.val(*x).shape(), *win, *stride, &g);
                    send(&mut grads, *x, gx);
                }
                Op::Sobel(x, dir) => {
                    let gx = kernels::sobel_backward(self.val(*x).shape(), *dir, &g);
                    send(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every bound parameter, by name. Parameters that did not
    /// influence the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.val(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<T: Real> Backend<T> for Graph<'_, T> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| Error::Config(format!("no parameters bound for `{name}`")))?;
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn value<'b>(&'b self, v: &'b Var) -> &'b Tensor<T> {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::binary(op, self.val(*a), self.val(*b))?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(out, Op::Binary(op, *a, *b), ng))
    }

    fn unary(&mut self, op: UnaryOp, x: &Var) -> Var {
        let out = kernels::unary(op, self.val(*x));
        let ng = self.ng(*x);
        self.push(out, Op::Unary(op, *x), ng)
    }

    fn maximum(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::maximum(self.val(*a), self.val(*b))?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(out, Op::Maximum(*a, *b), ng))
    }

    fn mean_over(&mut self, x: &Var, axes: [bool; 4]) -> Var {
        let out = kernels::mean_over(self.val(*x), axes);
        let ng = self.ng(*x);
        self.push(out, Op::Mean(*x, axes), ng)
    }

    fn narrow_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow_channels(self.val(*x), start, len)?;
        let ng = self.ng(*x);
        Ok(self.push(out, Op::Narrow(*x, start), ng))
    }

    fn concat_channels(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::concat_channels(self.val(*a), self.val(*b))?;
        let ng = self.ng(*a) || self.ng(*b);
        Ok(self.push(out, Op::Concat(*a, *b), ng))
    }

    fn reflect_pad(&mut self, x: &Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        if pad_h == 0 && pad_w == 0 {
            return Ok(*x);
        }
        let out = kernels::reflect_pad(self.val(*x), pad_h, pad_w)?;
        let ng = self.ng(*x);
        Ok(self.push(out, Op::ReflectPad(*x), ng))
    }

    fn crop(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let s = self.val(*x).shape();
        if s[2] == h && s[3] == w {
            return Ok(*x);
        }
        let out = kernels::crop(self.val(*x), h, w)?;
        let ng = self.ng(*x);
        Ok(self.push(out, Op::Crop(*x), ng))
    }

    fn pixel_shuffle(&mut self, x: &Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.val(*x), r)?;
        let ng = self.ng(*x);
        Ok(self.push(out, Op::PixelShuffle(*x, r), ng))
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Result<Var> {
        let out = kernels::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), g)?;
        let ng = self.ng(*x) || self.ng(*w) || b.is_some_and(|b| self.ng(*b));
        Ok(self.push(out, Op::Conv(*x, *w, b.copied(), g), ng))
    }

    fn depthwise3x3(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let out = kernels::depthwise3x3(self.val(*x), self.val(*w), b.map(|b| self.val(*b)))?;
        let ng = self.ng(*x) || self.ng(*w) || b.is_some_and(|b| self.ng(*b));
        Ok(self.push(out, Op::Depthwise(*x, *w, b.copied()), ng))
    }

    fn window_attention(&mut self, qkv: &Var, g: WindowGeom) -> Result<Var> {
        let (out, probs) = kernels::window_attention(self.val(*qkv), g)?;
        let ng = self.ng(*qkv);
        Ok(self.push(out, Op::WindowAttn(*qkv, g, probs), ng))
    }

    fn channel_attention(&mut self, q: &Var, k: &Var, v: &Var, gamma: &Var, g: ChannelAttnGeom) -> Result<Var> {
        let (out, probs) =
            kernels::channel_attention(self.val(*q), self.val(*k), self.val(*v), self.val(*gamma), g)?;
        let ng = [q, k, v, gamma].iter().any(|x| self.ng(**x));
        Ok(self.push(out, Op::ChannelAttn([*q, *k, *v, *gamma], g, probs), ng))
    }

    fn box_sum(&mut self, x: &Var, win: usize, stride: usize) -> Result<Var> {
        let out = kernels::box_sum(self.val(*x), win, stride)?;
        let ng = self.ng(*x);
        Ok(self.push(out, Op::BoxSum(*x, win, stride), ng))
    }

    fn sobel(&mut self, x: &Var, dir: SobelDir) -> Result<Var> {
        let out = kernels::sobel(self.val(*x), dir)?;
        let ng = self.ng(*x);
        Ok(self.push(out, Op::Sobel(*x, dir), ng))
    }
}

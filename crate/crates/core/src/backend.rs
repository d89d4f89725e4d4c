//! The op vocabulary the network and losses are written against.
//!
//! Layers are generic over [`Backend`], so the same code runs eagerly for
//! inference ([`Eager`], intermediates freed as soon as they go out of scope)
//! and on the recording tape for training ([`crate::autograd::Graph`]).

use std::rc::Rc;

use crate::error::Result;
use crate::kernels::{self, BinaryOp, ChannelAttnGeom, ConvGeom, SobelDir, UnaryOp, WindowGeom};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Which attention produced a captured map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Spatial self-attention inside windows; rows have `window^2` entries.
    Window { tokens: usize },
    /// Channel cross-covariance attention; rows have `channels / heads` entries.
    Channel { dim: usize },
}

/// Softmax maps captured during an eager forward pass.
#[derive(Clone, Debug)]
pub struct AttentionMap<T> {
    pub kind: AttentionKind,
    pub probs: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn row_len(&self) -> usize {
        match self.kind {
            AttentionKind::Window { tokens } => tokens,
            AttentionKind::Channel { dim } => dim,
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.probs.chunks(self.row_len())
    }
}

pub trait Backend<T: Real> {
    type Value: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value;
    fn param(&mut self, name: &str) -> Result<Self::Value>;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn binary(&mut self, op: BinaryOp, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn unary(&mut self, op: UnaryOp, x: &Self::Value) -> Self::Value;
    fn maximum(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mean_over(&mut self, x: &Self::Value, axes: [bool; 4]) -> Self::Value;
    fn narrow_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn reflect_pad(&mut self, x: &Self::Value, pad_h: usize, pad_w: usize) -> Result<Self::Value>;
    fn crop(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>, g: ConvGeom) -> Result<Self::Value>;
    fn depthwise3x3(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>) -> Result<Self::Value>;
    fn window_attention(&mut self, qkv: &Self::Value, g: WindowGeom) -> Result<Self::Value>;
    fn channel_attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        gamma: &Self::Value,
        g: ChannelAttnGeom,
    ) -> Result<Self::Value>;
    fn box_sum(&mut self, x: &Self::Value, win: usize, stride: usize) -> Result<Self::Value>;
    fn sobel(&mut self, x: &Self::Value, dir: SobelDir) -> Result<Self::Value>;

    fn shape(&self, v: &Self::Value) -> [usize; 4] {
        self.value(v).shape()
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Add, a, b)
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Sub, a, b)
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Mul, a, b)
    }

    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn scale(&mut self, x: &Self::Value, s: f64) -> Self::Value {
        self.unary(UnaryOp::Scale(s), x)
    }

    fn shift(&mut self, x: &Self::Value, s: f64) -> Self::Value {
        self.unary(UnaryOp::Shift(s), x)
    }

    fn mean_all(&mut self, x: &Self::Value) -> Self::Value {
        self.mean_over(x, [true; 4])
    }

    /// First element of a value, as `f64`.
    fn item(&self, v: &Self::Value) -> f64 {
        self.value(v).data()[0].to_f64().unwrap()
    }
}

/// Direct evaluation with no recording.
pub struct Eager<'a, T> {
    params: Option<&'a ParamStore<T>>,
    captured: Option<Vec<AttentionMap<T>>>,
}

impl<'a, T: Real> Eager<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Eager { params: Some(params), captured: None }
    }

    /// A backend for parameter-free computations (losses, metrics).
    pub fn without_params() -> Self {
        Eager { params: None, captured: None }
    }

    /// Keep every attention map produced from now on.
    pub fn capture_attention(mut self) -> Self {
        self.captured = Some(Vec::new());
        self
    }

    pub fn take_attention_maps(&mut self) -> Vec<AttentionMap<T>> {
        self.captured.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

impl<T: Real> Backend<T> for Eager<'_, T> {
    type Value = Rc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        Rc::new(t)
    }

    fn param(&mut self, name: &str) -> Result<Self::Value> {
        let store = self
            .params
            .ok_or_else(|| crate::error::Error::Config(format!("no parameters bound for `{name}`")))?;
        Ok(Rc::new(store.get(name)?.clone()))
    }

    fn value<'b>(&'b self, v: &'b Self::Value) -> &'b Tensor<T> {
        v
    }

    fn binary(&mut self, op: BinaryOp, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Rc::new(kernels::binary(op, a, b)?))
    }

    fn unary(&mut self, op: UnaryOp, x: &Self::Value) -> Self::Value {
        Rc::new(kernels::unary(op, x))
    }

    fn maximum(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Rc::new(kernels::maximum(a, b)?))
    }

    fn mean_over(&mut self, x: &Self::Value, axes: [bool; 4]) -> Self::Value {
        Rc::new(kernels::mean_over(x, axes))
    }

    fn narrow_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value> {
        Ok(Rc::new(kernels::narrow_channels(x, start, len)?))
    }

    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Rc::new(kernels::concat_channels(a, b)?))
    }

    fn reflect_pad(&mut self, x: &Self::Value, pad_h: usize, pad_w: usize) -> Result<Self::Value> {
        if pad_h == 0 && pad_w == 0 {
            return Ok(x.clone());
        }
        Ok(Rc::new(kernels::reflect_pad(x, pad_h, pad_w)?))
    }

    fn crop(&mut self, x: &Self::Value, h: usize, w: usize) -> Result<Self::Value> {
        if x.shape()[2] == h && x.shape()[3] == w {
            return Ok(x.clone());
        }
        Ok(Rc::new(kernels::crop(x, h, w)?))
    }

    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value> {
        Ok(Rc::new(kernels::pixel_shuffle(x, r)?))
    }

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>, g: ConvGeom) -> Result<Self::Value> {
        Ok(Rc::new(kernels::conv2d(x, w, b.map(|b| &**b), g)?))
    }

    fn depthwise3x3(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>) -> Result<Self::Value> {
        Ok(Rc::new(kernels::depthwise3x3(x, w, b.map(|b| &**b))?))
    }

    fn window_attention(&mut self, qkv: &Self::Value, g: WindowGeom) -> Result<Self::Value> {
        let (out, probs) = kernels::window_attention(qkv, g)?;
        if let Some(maps) = self.captured.as_mut() {
            maps.push(AttentionMap { kind: AttentionKind::Window { tokens: g.window * g.window }, probs });
        }
        Ok(Rc::new(out))
    }

    fn channel_attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        gamma: &Self::Value,
        g: ChannelAttnGeom,
    ) -> Result<Self::Value> {
        let (out, probs) = kernels::channel_attention(q, k, v, gamma, g)?;
        if let Some(maps) = self.captured.as_mut() {
            maps.push(AttentionMap { kind: AttentionKind::Channel { dim: q.shape()[1] / g.heads }, probs });
        }
        Ok(Rc::new(out))
    }

    fn box_sum(&mut self, x: &Self::Value, win: usize, stride: usize) -> Result<Self::Value> {
        Ok(Rc::new(kernels::box_sum(x, win, stride)?))
    }

    fn sobel(&mut self, x: &Self::Value, dir: SobelDir) -> Result<Self::Value> {
        Ok(Rc::new(kernels::sobel(x, dir)?))
    }
}
